//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed us something malformed (non-finite coordinates,
    /// mismatched lengths, out-of-range parameters).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix factorization failed even after jitter escalation.
    /// Carries the jitter values that were attempted, in order.
    #[error("factorization failed after jitter attempts {attempted_jitter:?}")]
    Factorization { attempted_jitter: Vec<f64> },

    /// Other numerical failure (divergence, non-finite objective).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The planner could not produce a usable path; callers keep the
    /// current path when they see this.
    #[error("planner failed: {0}")]
    Planner(String),

    /// Text-format parse failure (field files, configs, checkpoints).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Configuration rejected before a run starts.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
