use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad stack format: {0}")]
    Format(String),

    #[error("corrupt stack file: {0}")]
    CorruptFile(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix is not positive definite (prediction-error variance {variance:e} at order {order})")]
    NotPositiveDefinite { order: usize, variance: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
