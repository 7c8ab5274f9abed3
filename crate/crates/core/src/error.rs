use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid image dimensions {height}x{width}: {reason}")]
    Dimensions {
        height: usize,
        width: usize,
        reason: String,
    },

    #[error("wrong channel count: expected {expected}, got {got}")]
    Channels { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown schedule kind `{0}`")]
    UnknownSchedule(String),

    #[error("time {0} outside [0, 1]")]
    TimeRange(f64),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
