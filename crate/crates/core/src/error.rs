use thiserror::Error;

/// Failure modes shared across the toolkit.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller-supplied value or shape is unusable (bad dimension, bad range,
    /// missing field). These are programming or configuration mistakes, not
    /// runtime conditions.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Arithmetic produced a non-finite value. `index` points at the element
    /// (or example) that triggered it.
    #[error("numeric failure at index {index}: {reason}")]
    Numeric { index: usize, reason: String },

    /// No noise level inside the search bracket meets the privacy target.
    #[error("infeasible privacy target: {0}")]
    Infeasible(String),

    /// A training-loop invariant failed mid-run; the run is aborted.
    #[error("invariant violated at step {step}: {reason}")]
    Invariant { step: usize, reason: String },
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
