use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at stage {stage} step {step}; last good checkpoint: {}", last_good.display())]
    NonFiniteLoss { stage: usize, step: usize, last_good: PathBuf },
    #[error("corpus split {split:?} has no usable pages")]
    EmptySplit { split: String },
    #[error("could not build a {task} sample after {attempts} attempts")]
    NoSample { task: String, attempts: usize },
    #[error("train state: {0}")]
    State(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Model(#[from] textloc_model::ModelError),
    #[error(transparent)]
    Core(#[from] textloc_core::Error),
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainError::Io { path: path.into(), source }
    }
}
