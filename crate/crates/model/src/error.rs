use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("image {height}x{width} exceeds the supported {max_height}x{max_width}")]
    ImageTooLarge { height: usize, width: usize, max_height: usize, max_width: usize },
    #[error("image is empty")]
    EmptyImage,
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds the maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("target must start with <bos> and hold at least one more token")]
    MalformedTarget,
    #[error("non-finite loss (text {text_ce}, location {loc_ce})")]
    NonFiniteLoss { text_ce: f64, loc_ce: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint has {found}, expected {expected}")]
    VocabularyMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] textloc_core::Error),
}
