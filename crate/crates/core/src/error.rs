use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate input at row {row}: {reason}")]
    Degenerate { row: usize, reason: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
