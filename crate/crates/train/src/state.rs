//! Resumable training state, stored in the checkpoint container format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use textloc_core::Vocabulary;
use textloc_model::checkpoint::{decode_container, encode_container, TensorEntry};
use textloc_model::{Model, ModelConfig};

use crate::error::TrainError;
use crate::optim::AdamW;

const STATE_KIND: &str = "train_state";

/// Loss sums of the interval being logged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalAcc {
    pub steps: usize,
    pub total: f64,
    pub text_ce: f64,
    pub loc_ce: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    /// 1-based stage number.
    pub stage: usize,
    pub global_step: usize,
    pub validation_cer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// 1-based stage number.
    pub stage: usize,
    pub name: String,
    pub steps: usize,
    /// Mean total loss over the stage's last logged interval.
    pub final_loss: f64,
    pub validation_cer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: AdamW,
    /// Index of the stage in progress (equals the plan length when done).
    pub stage: usize,
    /// Steps completed within the current stage.
    pub step: usize,
    pub global_step: usize,
    /// Root of every data and dropout stream.
    pub seed: u64,
    pub interval: IntervalAcc,
    pub best: Option<BestSnapshot>,
    pub history: Vec<StageReport>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    config: ModelConfig,
    vocabulary: String,
    vocab_hash: String,
    stage: usize,
    step: usize,
    global_step: usize,
    seed: u64,
    interval: IntervalAcc,
    best: Option<BestSnapshot>,
    history: Vec<StageReport>,
    adam: AdamMeta,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: Vec<u64>,
}

impl TrainState {
    pub fn new(model: Model<f32>, seed: u64) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(Vec::len).collect();
        TrainState {
            optimizer: AdamW::new(&shapes),
            model,
            stage: 0,
            step: 0,
            global_step: 0,
            seed,
            interval: IntervalAcc::default(),
            best: None,
            history: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let meta = StateMeta {
            kind: STATE_KIND.into(),
            config: self.model.config().clone(),
            vocabulary: self.model.vocab().to_json(),
            vocab_hash: self.model.vocab().hash(),
            stage: self.stage,
            step: self.step,
            global_step: self.global_step,
            seed: self.seed,
            interval: self.interval,
            best: self.best,
            history: self.history.clone(),
            adam: AdamMeta {
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                steps: self.optimizer.steps.clone(),
            },
        };
        let specs = self.model.param_specs();
        let mut tensors: Vec<(TensorEntry, &[f32])> = Vec::with_capacity(specs.len() * 3);
        for (prefix, data) in [("param", self.model.params()), ("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            for (s, d) in specs.iter().zip(data) {
                tensors.push((TensorEntry { name: format!("{prefix}/{}", s.name), shape: s.shape.clone() }, d.as_slice()));
            }
        }
        Ok(encode_container(&serde_json::to_value(meta)?, &tensors)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let (meta, tensors) = decode_container(bytes)?;
        let meta: StateMeta = serde_json::from_value(meta)?;
        if meta.kind != STATE_KIND {
            return Err(TrainError::State(format!("expected {STATE_KIND}, found {:?}", meta.kind)));
        }
        let vocab = Vocabulary::from_json(&meta.vocabulary)?;
        if vocab.hash() != meta.vocab_hash {
            return Err(TrainError::State("vocabulary hash does not match its contents".into()));
        }
        let probe: Model<f32> = Model::new(meta.config.clone(), vocab.clone())?;
        let specs = probe.param_specs().to_vec();
        let n = specs.len();
        if tensors.len() != 3 * n {
            return Err(TrainError::State(format!("expected {} tensors, found {}", 3 * n, tensors.len())));
        }
        let mut groups: [Vec<Vec<f32>>; 3] = Default::default();
        for (i, (entry, data)) in tensors.into_iter().enumerate() {
            let (k, s) = (i / n, &specs[i % n]);
            let prefix = ["param", "adam.m", "adam.v"][k];
            if entry.name != format!("{prefix}/{}", s.name) || entry.shape != s.shape {
                return Err(TrainError::State(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            groups[k].push(data);
        }
        let [params, m, v] = groups;
        if meta.adam.steps.len() != n {
            return Err(TrainError::State("optimizer step counts do not match the parameters".into()));
        }
        let optimizer = AdamW { beta1: meta.adam.beta1, beta2: meta.adam.beta2, eps: meta.adam.eps, m, v, steps: meta.adam.steps };
        Ok(TrainState {
            model: Model::from_parts(meta.config, vocab, params)?,
            optimizer,
            stage: meta.stage,
            step: meta.step,
            global_step: meta.global_step,
            seed: meta.seed,
            interval: meta.interval,
            best: meta.best,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Whether `bytes` hold a train state rather than a bare model.
    pub fn is_state_file(bytes: &[u8]) -> bool {
        decode_container(bytes)
            .ok()
            .and_then(|(meta, _)| meta.get("kind").cloned())
            .is_some_and(|k| k == json!(STATE_KIND))
    }
}

/// Writes to a temporary sibling, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| TrainError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}
