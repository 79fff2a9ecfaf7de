//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("unsupported {field} value {value:?}")]
    UnsupportedFormat { field: &'static str, value: String },

    #[error("raw data length mismatch: expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },

    #[error("expected dtype {expected}, got {actual}")]
    DtypeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("external predictor failed: {0}")]
    Predictor(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
