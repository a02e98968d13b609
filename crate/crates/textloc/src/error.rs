use std::path::PathBuf;

/// Failure of one inference request, classified by who is at fault.
#[derive(Debug, thiserror::Error)]
pub enum InferError {
    /// The request is malformed or the image cannot be used.
    #[error("{0}")]
    BadRequest(String),
    /// The query holds characters the vocabulary cannot express.
    #[error("query characters not in vocabulary: {chars:?}")]
    UnknownChars { chars: Vec<char> },
    #[error("inference failed: {0}")]
    Internal(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
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
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] textloc_core::Error),
    #[error(transparent)]
    Model(#[from] textloc_model::ModelError),
    #[error(transparent)]
    Train(#[from] textloc_train::TrainError),
    #[error(transparent)]
    Infer(#[from] InferError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
