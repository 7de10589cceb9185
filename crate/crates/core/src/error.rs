//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside its mathematical domain (e.g. pseudo-time outside [0,1]).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Covariance could not be factorized even after the jitter ladder.
    #[error("covariance not positive definite after jitter")]
    SingularCovariance,

    /// The noise schedule drift is singular at the requested time.
    #[error("noise schedule singular at t = {0}")]
    ScheduleSingularity(f64),

    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    /// A reverse-SDE trajectory produced a non-finite state.
    #[error("non-finite value in ensemble member {member} at t = {t}")]
    NonFinite { member: usize, t: f64 },

    /// All particle log-likelihoods underflowed; no weight survives.
    #[error("degenerate particle weights: every likelihood underflowed")]
    DegenerateWeights,

    /// Grid oracle bounds do not cover the posterior mass.
    #[error("grid bounds miss the posterior mass (total mass underflowed)")]
    GridCoverage,

    #[error("singular observation Jacobian at the evaluation point")]
    SingularJacobian,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
