#![allow(dead_code)]

use std::io::Cursor;

use textloc::core::synthgen::{generate_page, PageSpec};
use textloc::core::{QuantGrid, Vocabulary};
use textloc::model::{checkpoint, Model, ModelConfig};
use textloc::train::{BatchSource, Page, StagePlan, TrainConfig, Trainer};
use textloc::Engine;

pub const W: u32 = 160;
pub const H: u32 = 48;

pub fn png(page: &Page) -> Vec<u8> {
    let img = image::GrayImage::from_raw(page.width as u32, page.height as u32, page.luma.clone()).unwrap();
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

pub fn blank_png(w: u32, h: u32) -> Vec<u8> {
    let img = image::GrayImage::from_pixel(w, h, image::Luma([255]));
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

/// Small pages generated in memory.
pub fn pages(n: u64, seed: u64) -> Vec<Page> {
    let mut spec = PageSpec::wiki(W, H);
    spec.lines = (1, 2);
    spec.words_per_line = (2, 4);
    (0..n)
        .map(|i| {
            let g = generate_page(&spec.with_seed(seed * 1000 + i)).unwrap();
            Page {
                id: format!("p{i}"),
                width: g.image.width() as usize,
                height: g.image.height() as usize,
                luma: g.image.into_raw(),
                lines: g.manifest.lines,
            }
        })
        .collect()
}

pub fn vocab() -> Vocabulary {
    Vocabulary::new(QuantGrid::new(10, W, H).unwrap())
}

/// Untrained micro model behind an engine.
pub fn micro_engine() -> Engine {
    let vocab = vocab();
    let cfg = ModelConfig::micro(&vocab, Default::default());
    let model: Model<f32> = Model::new(cfg, vocab).unwrap();
    Engine::from_bytes(&checkpoint::to_bytes(&model).unwrap()).unwrap()
}

/// All four stages on a handful of pages until region reading and
/// localization are memorized.
pub fn overfit_engine(pages: &[Page]) -> Engine {
    let vocab = vocab();
    let mut plan = StagePlan::progressive([60, 200, 300, 900], 8, 3e-3);
    plan.stages[3].task_mix = [0.1, 0.2, 0.35, 0.35];
    let mut config = TrainConfig::new(3, plan);
    config.log_every = 100;
    config.find_it_words = (1, 4);
    let trainer = Trainer {
        config: &config,
        source: BatchSource { pages, vocab: &vocab, scheme: config.scheme, find_it_words: config.find_it_words, seed: 3 },
        validation: &[],
        out_dir: None,
    };
    let mut state = trainer.init_state().unwrap();
    trainer.run(&mut state, None, &mut |r| eprintln!("{r:?}")).unwrap();
    Engine::from_bytes(&checkpoint::to_bytes(&state.model).unwrap()).unwrap()
}
