//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("measurement is rank deficient: rank {rank} < required {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iter}: {what}")]
    Diverged { iter: usize, what: String },

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}
