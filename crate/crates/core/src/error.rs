use thiserror::Error;

/// Errors raised by the optimization library.
#[derive(Debug, Error)]
pub enum DesError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("objective returned NaN ({context})")]
    NanObjective { context: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DesError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        DesError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DesError>;
