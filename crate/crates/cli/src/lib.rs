//! Experiment runner for the DES benchmarks: spec files, matrix expansion
//! and CSV output.

pub mod matrix;
pub mod spec;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid `{field}`: {reason}")]
    Field { field: String, reason: String },

    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for bad input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Field { .. } | CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
