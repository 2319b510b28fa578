//! Experiment runner: configuration, stages and report output.

pub mod config;
pub mod pipeline;

use thiserror::Error;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, Command, RunOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("train: {0}")]
    Train(String),
    #[error("evaluate: {0}")]
    Eval(String),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Train(_) => 4,
            CliError::Eval(_) => 5,
        }
    }
}
