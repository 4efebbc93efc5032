use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: {count} trailing bytes after the last record")]
    TrailingBytes { path: PathBuf, count: usize },

    #[error("feature dimension must be positive")]
    ZeroDimension,

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("invalid utf-8 in record text for id {0}")]
    InvalidText(u64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in vector for id {0}")]
    NonFinite(u64),

    #[error("zero-norm vector for id {0}")]
    ZeroNorm(u64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid semantic id: {0}")]
    InvalidId(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index is empty")]
    EmptyIndex,

    #[error("candidate video {0} is not in the video store")]
    MissingVideo(u64),

    #[error("query {0} has no ground-truth target")]
    MissingTarget(u64),

    #[error("infeasible facet angle floor: {0}")]
    InfeasibleAngle(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(Box<crate::cotrainer::AbortSnapshot>),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
