//! File formats, experiment configuration and the `fedbio` command line on
//! top of [`fedbio_core`].
//!
//! * [`data`]: CSV ingestion with one-hot and z-score encoding.
//! * [`logio`]: NDJSON run logs and their CSV export.
//! * [`config`]: TOML experiment files.
//! * [`runner`]: seed sweeps, per-run outputs and summary tables.
// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod logio;
pub mod runner;

pub use config::{parse_config, ExperimentConfig};
pub use runner::{emit_summary, run_experiment, summarize_dir, SummaryTable};

/// Failure categories of the command line, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        if e.is_parse_error() {
            CliError::Parse(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<runner::RunError> for CliError {
    fn from(e: runner::RunError) -> Self {
        CliError::Runtime(e.to_string())
    }
}
