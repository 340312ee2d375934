use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the filtering, training and dataset layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Misuse of a stateful object (for example updating before predicting).
    #[error("invalid state: {0}")]
    State(String),

    #[error("training failed: {0}")]
    Training(String),

    /// The innovation covariance stayed singular after jitter escalation.
    #[error("filter diverged at step {step}: {reason} (last jitter {jitter:e})")]
    Divergence {
        step: u64,
        jitter: f64,
        reason: String,
        innovation_covariance: Vec<f64>,
    },

    #[error("parse error in {path}: line {line}, field {field}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        field: String,
        message: String,
    },

    #[error("dataset invariant violated: {0}")]
    Invariant(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
