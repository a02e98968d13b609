//! Progressive multitask training of the text/location model, checkpoint
//! evaluation, and the ablation studies.
//!
//! Training runs a [`StagePlan`]: encoder calibration against a frozen
//! decoder, text OCR, text plus layout, then all four tasks. Batches are a
//! pure function of `(seed, stage, step)`, so a paused and resumed run logs
//! exactly the same losses as an uninterrupted one.

pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod sampler;
pub mod state;
pub mod studies;
pub mod trainer;

mod error;

pub use config::{ModelShape, Schedule, Stage, StagePlan, TrainConfig};
pub use data::{load_pages, BatchSource, Page};
pub use error::TrainError;
pub use eval::{evaluate, evaluate_checkpoint, EvalOptions, EvalReport, EvalSet, OraclePredictor, Predictor};
pub use sampler::task_sampler;
pub use state::TrainState;
pub use trainer::{LogRow, RunOutcome, Trainer};
