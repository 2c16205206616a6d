use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("value {value} at index {index} is outside [0, 1]")]
    Range { index: usize, value: f32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported sampling stride {0} (expected 1, 2 or 4)")]
    UnsupportedStride(usize),

    #[error("infeasible crop: {0}")]
    InfeasibleCrop(String),

    #[error("transform is not invertible")]
    NonInvertible,

    #[error("clip has {frames} frames, need at least {needed}")]
    ClipTooShort { frames: usize, needed: usize },

    #[error("loss is undefined: every label row is masked")]
    UndefinedLoss,

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("data source exhausted")]
    SourceExhausted,

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
