//! CLI error categories and their process exit codes.

use thiserror::Error;

/// Exit code table (also shown in `--help`): 0 success, 2 configuration
/// error, 3 data or environment error, 4 acceptance-gate failure.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration: unreadable/invalid config file, invalid flags,
    /// schema violations, model/schema mismatches.
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad data or environment: missing datasets or checkpoints, IO
    /// failures, lock conflicts, failures while a run executes.
    #[error("data error: {0}")]
    Data(String),
    /// A report or check gate did not hold.
    #[error("gate failure: {0}")]
    Gate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Gate(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
