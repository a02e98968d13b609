//! Training configuration: model shape, stage plan and run settings.
//!
//! Files are JSON or TOML (chosen by extension) with this schema:
//!
//! ```toml
//! seed = 7
//! scheme = "original"        # original | segmented | unified
//! log_every = 10
//! find_it_words = [1, 4]
//! validation_pages = 32
//!
//! [model]
//! d_model = 96
//! heads = 4
//! layers = 2
//! ffn = 256
//! max_seq_len = 512
//! dropout = 0.0
//! seed = 17
//! encoder = [{ channels = 16, stride = [2, 2] }, { channels = 32, stride = [2, 2] }]
//!
//! [[plan.stages]]
//! name = "calibrate"
//! task_mix = [1.0, 0.0, 0.0, 0.0]  # ocr, ocr_layout, read_at, find_it
//! groups = ["encoder"]
//! steps = 200
//! batch_size = 8
//! lambda = 0.5
//! weight_decay = 0.01
//! clip_norm = 1.0
//! schedule = { lr = 0.002, warmup = 20, min_lr_frac = 0.1 }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use textloc_core::{EncodingScheme, QuantGrid, TaskKind, Vocabulary};
use textloc_model::{ConvStage, ModelConfig, ParamGroup};

use crate::error::TrainError;

/// Linear warmup to `lr`, then cosine decay to `lr * min_lr_frac`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup: usize,
    pub min_lr_frac: f64,
}

impl Schedule {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_frac;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Ratios over `[ocr, ocr_layout, read_at, find_it]`.
    pub task_mix: [f64; 4],
    /// Parameter groups updated in this stage.
    pub groups: Vec<ParamGroup>,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub schedule: Schedule,
}

/// Position (0-based) of the first stage allowed to train on each task.
pub const TASK_INTRODUCED_AT: [usize; 4] = [0, 2, 3, 3];

pub const DEFAULT_STAGE4_MIX: [f64; 4] = [0.2, 0.4, 0.2, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    /// The four-stage curriculum with the given per-stage step budgets:
    /// encoder calibration on text-only OCR against a frozen decoder, full
    /// text OCR, text plus layout, then all four tasks.
    pub fn progressive(steps: [usize; 4], batch_size: usize, lr: f64) -> Self {
        let stage = |name: &str, mix: [f64; 4], groups: Vec<ParamGroup>, steps: usize| Stage {
            name: name.into(),
            task_mix: mix,
            groups,
            steps,
            batch_size,
            lambda: 0.5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            schedule: Schedule { lr, warmup: (steps / 10).clamp(1, 200), min_lr_frac: 0.05 },
        };
        let all = vec![ParamGroup::Encoder, ParamGroup::Decoder];
        StagePlan {
            stages: vec![
                stage("calibrate", [1.0, 0.0, 0.0, 0.0], vec![ParamGroup::Encoder], steps[0]),
                stage("text", [1.0, 0.0, 0.0, 0.0], all.clone(), steps[1]),
                stage("layout", [0.25, 0.75, 0.0, 0.0], all.clone(), steps[2]),
                stage("multitask", DEFAULT_STAGE4_MIX, all, steps[3]),
            ],
        }
    }

    /// First `n` stages only.
    pub fn truncated(mut self, n: usize) -> Self {
        self.stages.truncate(n);
        self
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let Some(first) = self.stages.first() else {
            return bad("plan has no stages".into());
        };
        if first.groups.contains(&ParamGroup::Decoder) || !first.groups.contains(&ParamGroup::Encoder) {
            return bad("stage 1 must train the encoder with the decoder frozen".into());
        }
        if self.stages.len() > 4 {
            return bad(format!("plan has {} stages, at most 4 are defined", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            let sum: f64 = s.task_mix.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || s.task_mix.iter().any(|r| *r < 0.0) {
                return bad(format!("stage {n}: task mix must sum to 1, got {sum}"));
            }
            for t in TaskKind::ALL {
                if s.task_mix[t.index()] > 0.0 && TASK_INTRODUCED_AT[t.index()] > i {
                    return bad(format!("stage {n}: task {t} is not introduced until stage {}", TASK_INTRODUCED_AT[t.index()] + 1));
                }
            }
            if s.groups.is_empty() {
                return bad(format!("stage {n}: no trainable groups"));
            }
            if s.steps == 0 || s.batch_size == 0 {
                return bad(format!("stage {n}: steps and batch_size must be positive"));
            }
            if !(0.0..=1.0).contains(&s.lambda) {
                return bad(format!("stage {n}: lambda must lie in [0, 1]"));
            }
            if !(s.schedule.lr > 0.0) || s.weight_decay < 0.0 || s.clip_norm < 0.0 || !(0.0..=1.0).contains(&s.schedule.min_lr_frac) {
                return bad(format!("stage {n}: invalid optimizer settings"));
            }
        }
        Ok(())
    }
}

/// Architecture settings that do not depend on the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub encoder: Vec<ConvStage>,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelShape {
    pub fn from_config(c: &ModelConfig) -> Self {
        ModelShape {
            encoder: c.encoder.clone(),
            d_model: c.d_model,
            heads: c.heads,
            layers: c.layers,
            ffn: c.ffn,
            max_seq_len: c.max_seq_len,
            dropout: c.dropout,
            seed: c.seed,
        }
    }

    pub fn desk() -> Self {
        let v = Vocabulary::new(QuantGrid::new(10, 10, 10).expect("valid grid"));
        Self::from_config(&ModelConfig::desk(&v, EncodingScheme::Original))
    }

    pub fn config(&self, vocab: &Vocabulary, scheme: EncodingScheme) -> ModelConfig {
        ModelConfig {
            grid: *vocab.grid(),
            scheme,
            vocab_size: vocab.len(),
            encoder: self.encoder.clone(),
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ffn: self.ffn,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            seed: self.seed,
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default)]
    pub scheme: EncodingScheme,
    #[serde(default)]
    pub model: ModelShape,
    pub plan: StagePlan,
    /// Steps per logged interval.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Word-count range of localization queries sampled during training.
    #[serde(default = "default_find_it_words")]
    pub find_it_words: (usize, usize),
    /// Held-out pages scored with text-only CER at the end of each stage
    /// (0 disables).
    #[serde(default)]
    pub validation_pages: usize,
}

fn default_log_every() -> usize {
    10
}

fn default_find_it_words() -> (usize, usize) {
    (1, 4)
}

impl TrainConfig {
    pub fn new(seed: u64, plan: StagePlan) -> Self {
        TrainConfig {
            seed,
            scheme: EncodingScheme::Original,
            model: ModelShape::desk(),
            plan,
            log_every: default_log_every(),
            find_it_words: default_find_it_words(),
            validation_pages: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.plan.validate()?;
        if self.log_every == 0 {
            return Err(TrainError::Config("log_every must be positive".into()));
        }
        if self.find_it_words.0 == 0 || self.find_it_words.0 > self.find_it_words.1 {
            return Err(TrainError::Config("find_it_words must be a range starting at 1 or more".into()));
        }
        Ok(())
    }

    /// Reads a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            _ => serde_json::from_str(&text)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
