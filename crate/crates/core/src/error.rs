use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at {stage}")]
    NonFinite { stage: String },

    #[error("finite-difference evaluation produced a non-finite value at coordinate {index}")]
    NonFiniteProbe { index: usize },

    #[error("vjp cache does not match: {0}")]
    CacheMismatch(String),

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { path: PathBuf, offset: u64, needed: u64 },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("key {key} has no active frames in the reference")]
    KeyAbsent { key: usize },

    #[error("invalid note data: {0}")]
    InvalidLabel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn non_finite(stage: impl Into<String>) -> Self {
        Error::NonFinite { stage: stage.into() }
    }

    /// True for numerical failures (NaN/Inf), as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteProbe { .. })
    }
}
