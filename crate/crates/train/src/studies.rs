//! Ablations and diagnostic studies built on training and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use textloc_core::geometry::expand;
use textloc_core::metrics::{ap_iou, deteval_default, MatchCounts, Prf};
use textloc_core::synthgen::{derive_seed, sample_find_it};
use textloc_core::{dequantize, quantize, BBox, EncodingScheme, QuantGrid, TaskKind, TaskPrompt, Vocabulary};
use textloc_model::Model;

use crate::config::TrainConfig;
use crate::data::{BatchSource, Page};
use crate::error::TrainError;
use crate::eval::{evaluate, EvalOptions, EvalSet, Predictor};
use crate::trainer::Trainer;

/// Trains a fresh model on `pages` with `config` and returns it.
pub fn train_model(config: &TrainConfig, vocab: &Vocabulary, pages: &[Page]) -> Result<Model<f32>, TrainError> {
    let trainer = Trainer {
        config,
        source: BatchSource { pages, vocab, scheme: config.scheme, find_it_words: config.find_it_words, seed: config.seed },
        validation: &[],
        out_dir: None,
    };
    let mut state = trainer.init_state()?;
    trainer.run(&mut state, None, &mut |_| {})?;
    Ok(state.model)
}

/// One row of the encoding-scheme comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRow {
    pub scheme: EncodingScheme,
    pub detection: Prf,
    pub recognition: Prf,
}

impl SchemeRow {
    pub fn cells(&self) -> [f64; 6] {
        let (d, r) = (self.detection, self.recognition);
        [d.precision, d.recall, d.f1, r.precision, r.recall, r.f1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeTable {
    pub rows: Vec<SchemeRow>,
}

impl SchemeTable {
    /// Three rows with every score in [0, 1].
    pub fn is_complete(&self) -> bool {
        self.rows.len() == 3 && self.rows.iter().all(|r| r.cells().iter().all(|c| (0.0..=1.0).contains(c)))
    }

    /// Whether the unified scheme scores at least as well as the others on
    /// both F1 columns.
    pub fn unified_leads(&self) -> bool {
        let Some(u) = self.rows.iter().find(|r| r.scheme == EncodingScheme::Unified) else { return false };
        self.rows.iter().all(|r| r.detection.f1 <= u.detection.f1 && r.recognition.f1 <= u.recognition.f1)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| scheme | det P | det R | det F1 | rec P | rec R | rec F1 |\n|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let c = r.cells();
            s += &format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                r.scheme.name(), c[0], c[1], c[2], c[3], c[4], c[5]
            );
        }
        s
    }
}

/// Detection and word-level recognition scores of layout OCR.
pub fn layout_scores(predictor: &dyn Predictor, set: &EvalSet) -> Result<(Prf, Prf), TrainError> {
    let report = evaluate(predictor, set, &EvalOptions { tasks: vec![TaskKind::OcrLayout], dump: None })?;
    let m = report.get(TaskKind::OcrLayout).expect("requested task");
    let prf = |p: Option<f64>, r: Option<f64>, f: Option<f64>| Prf { precision: p.unwrap_or(0.0), recall: r.unwrap_or(0.0), f1: f.unwrap_or(0.0) };
    Ok((
        prf(m.det_precision, m.det_recall, m.det_f1),
        prf(m.word_precision, m.word_recall, m.word_f1),
    ))
}

/// Trains one model per encoding scheme with otherwise identical settings
/// and scores layout OCR on `eval`.
pub fn ablate_encodings(base: &TrainConfig, vocab: &Vocabulary, train: &[Page], eval: &EvalSet) -> Result<SchemeTable, TrainError> {
    let mut rows = Vec::new();
    for scheme in EncodingScheme::ALL {
        let config = TrainConfig { scheme, ..base.clone() };
        let model = train_model(&config, vocab, train)?;
        let (detection, recognition) = layout_scores(&model, eval)?;
        log::info!("{}: det F1 {:.4}, rec F1 {:.4}", scheme.name(), detection.f1, recognition.f1);
        rows.push(SchemeRow { scheme, detection, recognition });
    }
    Ok(SchemeTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub step_px: u32,
    /// Location tokens per axis (x, y).
    pub tokens: (u32, u32),
    /// Mean absolute difference between each ground-truth box coordinate
    /// and its dequantized value, in pixels.
    pub mean_corner_error: f64,
    /// DetEval F1 of perfectly predicted location tokens.
    pub oracle_det_f1: f64,
    /// Scores of a model trained at this step, when training was requested.
    pub trained: Option<GridTrained>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridTrained {
    pub detection: Prf,
    pub recognition: Prf,
}

/// Quantization error of ground-truth boxes at one grid step.
pub fn quantization_error(pages: &[Page], grid: &QuantGrid) -> (f64, f64) {
    let (mut sum, mut n) = (0.0, 0usize);
    let mut det = MatchCounts::default();
    for p in pages {
        let gt: Vec<BBox> = p.lines.iter().map(|l| l.bbox).collect();
        let back: Vec<BBox> = gt.iter().map(|b| dequantize(&quantize(b, grid), grid)).collect();
        for (g, q) in gt.iter().zip(&back) {
            for (a, b) in g.to_array().iter().zip(q.to_array()) {
                sum += (a - b).abs();
                n += 1;
            }
        }
        det.add(deteval_default(&gt, &back).counts);
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, det.prf().f1)
}

/// Corner error and oracle detection score per grid step; with `train`, also
/// trains and scores a model at every step.
pub fn ablate_grid(
    steps: &[u32],
    extent: (u32, u32),
    pages: &[Page],
    train: Option<(&TrainConfig, &[Page], &EvalSet)>,
) -> Result<Vec<GridRow>, TrainError> {
    let mut rows = Vec::new();
    for &step in steps {
        let grid = QuantGrid::new(step, extent.0, extent.1)?;
        let (mean_corner_error, oracle_det_f1) = quantization_error(pages, &grid);
        let trained = match train {
            Some((config, train_pages, eval)) => {
                let vocab = Vocabulary::new(grid);
                let model = train_model(config, &vocab, train_pages)?;
                let (detection, recognition) = layout_scores(&model, eval)?;
                Some(GridTrained { detection, recognition })
            }
            None => None,
        };
        rows.push(GridRow { step_px: step, tokens: (grid.n_x, grid.n_y), mean_corner_error, oracle_det_f1, trained });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBucket {
    pub words: (usize, usize),
    pub queries: usize,
    pub ap_iou_50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordsPerQueryReport {
    pub buckets: Vec<QueryBucket>,
    /// Longer queries localize at least as well as shorter ones.
    pub direction_holds: bool,
    pub warning: Option<String>,
}

/// AP@IoU50 of localization queries grouped by query length in words. At
/// most one query per page and bucket is drawn, from a seeded stream.
pub fn words_per_query(
    predictor: &dyn Predictor,
    pages: &[Page],
    buckets: &[(usize, usize)],
    seed: u64,
) -> Result<WordsPerQueryReport, TrainError> {
    let grid = *predictor.vocab().grid();
    let mut out = Vec::new();
    for (b, &(lo, hi)) in buckets.iter().enumerate() {
        let mut results = Vec::new();
        for (i, page) in pages.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 3000 + b as u64));
            let Some(query) = sample_find_it(&page.lines, lo..=hi, &mut rng) else { continue };
            let gt = page
                .lines
                .iter()
                .find(|l| textloc_core::codec::contains_word_span(&l.text, &query))
                .expect("sampled query occurs in a line")
                .bbox;
            let generation = predictor.predict(page, &TaskPrompt::FindIt(query))?;
            let (q, _) = textloc_core::decode_box(&generation.tokens, predictor.vocab(), predictor.scheme());
            results.push((gt, q.map(|q| dequantize(&q, &grid))));
        }
        out.push(QueryBucket { words: (lo, hi), queries: results.len(), ap_iou_50: ap_iou(&results, 0.5) });
    }
    let direction_holds = out.windows(2).all(|w| w[1].ap_iou_50 >= w[0].ap_iou_50);
    let warning = (!direction_holds).then(|| {
        let cells: Vec<String> = out.iter().map(|b| format!("{}-{} words: {:.3}", b.words.0, b.words.1, b.ap_iou_50)).collect();
        format!("longer queries did not localize better ({})", cells.join(", "))
    });
    Ok(WordsPerQueryReport { buckets: out, direction_holds, warning })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadRow {
    pub pad: f64,
    pub counts: MatchCounts,
    pub prf: Prf,
}

/// One page of the padding study: ground truth, predictions, image size.
#[derive(Debug, Clone, PartialEq)]
pub struct PadCase {
    pub gt: Vec<BBox>,
    pub pred: Vec<BBox>,
    pub width: f64,
    pub height: f64,
}

/// Micro-averaged DetEval after growing every prediction by each pad.
pub fn padding_table(cases: &[PadCase], pads: &[f64]) -> Vec<PadRow> {
    pads.iter()
        .map(|&pad| {
            let mut counts = MatchCounts::default();
            for c in cases {
                let grown: Vec<BBox> = c.pred.iter().map(|b| expand(b, pad, c.width, c.height)).collect();
                counts.add(deteval_default(&c.gt, &grown).counts);
            }
            PadRow { pad, counts, prf: counts.prf() }
        })
        .collect()
}
