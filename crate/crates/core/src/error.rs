use thiserror::Error;

/// Errors raised across the crate.
///
/// Each variant maps to a fixed process exit code in the CLI, so new
/// variants should be appended rather than inserted.
#[derive(Debug, Error)]
pub enum IsingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("capacity exceeded: {what} is {got}, limit {limit}")]
    Capacity { what: String, got: u64, limit: u64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("estimator failure: {0}")]
    Estimator(String),

    #[error("sampler failure after {trials} trials ({steps} chain steps): {reason}")]
    SamplerFailure {
        trials: u64,
        steps: u64,
        reason: String,
    },

    #[error("consistency check failed: {0}")]
    Consistency(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, IsingError>;

impl IsingError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub(crate) fn capacity(what: impl Into<String>, got: u64, limit: u64) -> Self {
        Self::Capacity {
            what: what.into(),
            got,
            limit,
        }
    }
}
