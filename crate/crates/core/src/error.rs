use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("dimension mismatch: {first_name} is {first:?} but {second_name} is {second:?}")]
    DimensionMismatch {
        first_name: String,
        first: (usize, usize),
        second_name: String,
        second: (usize, usize),
    },

    #[error("image too small for {context}: {height}x{width}, need at least {min}x{min}")]
    TooSmall {
        context: String,
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("value out of range: {value} not in [{min}, {max}] ({context})")]
    Range {
        context: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("no observed pixels in {0}")]
    EmptyObservation(String),

    #[error("invalid prediction {value} at observed pixel {index}: ratio undefined")]
    InvalidPrediction { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint fingerprint mismatch: checkpoint has {found}, configuration expects {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for filesystem and file-format failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. })
    }
}
