//! Trains one small model per location-encoding scheme on a generated corpus
//! and prints the comparison table.
//!
//! ```text
//! cargo run --release -p textloc --example encoding_ablation
//! ```

use textloc::core::synthgen::{build_corpus, Corpus, CorpusConfig, PageSpec};
use textloc::core::Vocabulary;
use textloc::train::studies::ablate_encodings;
use textloc::train::{load_pages, EvalSet, StagePlan, TrainConfig};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("textloc-ablation-corpus");
    let _ = std::fs::remove_dir_all(&dir);
    let mut spec = PageSpec::wiki(160, 48);
    spec.lines = (1, 2);
    spec.words_per_line = (2, 4);
    build_corpus(&CorpusConfig::new(120, 4, spec), &dir)?;
    let corpus = Corpus::open(&dir)?;
    let vocab = Vocabulary::new(corpus.grid());
    let train = load_pages(&corpus, "train", None)?;
    let eval = EvalSet::from_corpus(&corpus, "test", None)?;
    let base = TrainConfig::new(2, StagePlan::progressive([5, 100, 100, 20], 8, 2e-3));
    let table = ablate_encodings(&base, &vocab, &train, &eval)?;
    print!("{}", table.to_markdown());
    Ok(())
}
