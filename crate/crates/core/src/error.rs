use std::path::PathBuf;

use crate::geometry::BBox;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box {0:?}: need 0 <= x1 <= x2 and 0 <= y1 <= y2")]
    InvalidBox(BBox),
    #[error("invalid grid: step {step_px}px over {max_width}x{max_height}")]
    InvalidGrid { step_px: u32, max_width: u32, max_height: u32 },
    #[error("element {index}: box {bbox:?} lies outside the quantization grid")]
    BoxOutsideGrid { index: usize, bbox: BBox },
    #[error("element {index}: text is empty")]
    EmptyText { index: usize },
    #[error("characters not in vocabulary: {chars:?}")]
    UnknownChars { chars: Vec<char> },
    #[error("query is empty")]
    EmptyQuery,
    #[error("region {0:?} is not valid for the grid")]
    InvalidRegion([u32; 4]),
    #[error("query {query:?} matches {count} lines, expected exactly one")]
    AmbiguousQuery { query: String, count: usize },
    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),
    #[error("layout failed after {attempts} attempts: {reason}")]
    Layout { attempts: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
