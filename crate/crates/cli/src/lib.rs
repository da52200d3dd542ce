//! Command-line driver: config parsing, resumable experiment directories
//! and the `generate` / `transfer` / `permute` / `report` commands.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{cmd_generate, cmd_permute, cmd_report, cmd_transfer, RunOptions, RunSummary};
pub use config::HarnessConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
    #[error("incomplete: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Incomplete(_) | CliError::Other(_) => 1,
        }
    }
}
