//! Runs all four training stages of a small model on in-memory pages and
//! saves the result.
//!
//! ```text
//! cargo run --release -p textloc --example train_tiny -- /tmp/tiny.ckpt
//! ```

use std::path::PathBuf;

use textloc::core::synthgen::{generate_page, PageSpec};
use textloc::core::{QuantGrid, Vocabulary};
use textloc::model::checkpoint;
use textloc::train::{BatchSource, Page, StagePlan, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("textloc-tiny.ckpt"));
    let mut spec = PageSpec::wiki(160, 48);
    spec.lines = (1, 2);
    spec.words_per_line = (2, 4);
    let pages: Vec<Page> = (0..64)
        .map(|i| {
            let g = generate_page(&spec.with_seed(i))?;
            Ok(Page { id: i.to_string(), width: 160, height: 48, luma: g.image.into_raw(), lines: g.manifest.lines })
        })
        .collect::<anyhow::Result<_>>()?;
    let vocab = Vocabulary::new(QuantGrid::new(10, 160, 48)?);

    let mut config = TrainConfig::new(1, StagePlan::progressive([5, 60, 60, 40], 8, 2e-3));
    config.log_every = 20;
    let trainer = Trainer {
        config: &config,
        source: BatchSource { pages: &pages, vocab: &vocab, scheme: config.scheme, find_it_words: config.find_it_words, seed: 1 },
        validation: &pages[..4],
        out_dir: None,
    };
    let mut state = trainer.init_state()?;
    trainer.run(&mut state, None, &mut |r| println!("stage {} step {:>4}  text {:.3}  loc {:.3}", r.stage, r.step, r.text_ce, r.loc_ce))?;
    for s in &state.history {
        println!("{} ({} steps): validation CER {:?}", s.name, s.steps, s.validation_cer);
    }
    checkpoint::save(&state.model, &out)?;
    println!("saved {}", out.display());
    Ok(())
}
