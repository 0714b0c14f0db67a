//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, smoothing and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, out-of-range parameters or malformed inputs.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The filter or smoother hit a nonpositive innovation variance or a
    /// negative posterior variance beyond tolerance.
    #[error("degenerate model at pulse {pulse}: {detail}")]
    DegenerateModel { pulse: usize, detail: String },

    /// The marginal density of the observations is singular.
    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),

    /// Dense oracle instance exceeds the size guard.
    #[error("oracle instance of size {size} exceeds the dense-solve guard {max}")]
    OversizeOracle { size: usize, max: usize },

    /// The quadratic M-step system stayed singular after regularization.
    #[error("ill-conditioned M-step: {0}")]
    IllConditionedMStep(String),

    /// EM loop aborted; carries the iteration index for diagnosis.
    #[error("EM aborted at iteration {iter}: {detail}")]
    EmAborted { iter: usize, detail: String },

    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
