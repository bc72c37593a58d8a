//! Command-line driver: synthetic data generation, training, evaluation,
//! guided alignment and checkpoint inspection.

pub mod checkpoint;
pub mod commands;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] motionfield::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 2 usage, 3 divergence, 4 malformed input file, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(motionfield::Error::Divergence { .. }) => 3,
            CliError::Core(motionfield::Error::Format { .. } | motionfield::Error::Parse { .. }) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}
