use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CalibError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CalibError {
    /// Input data violates a type invariant (non-finite logit, bad label, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A caller-supplied parameter is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Optimization produced a non-finite loss or parameter.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CalibError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        CalibError::InvalidInput(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        CalibError::InvalidArgument(msg.into())
    }
}
