//! Nonlinear data assimilation with score-based diffusion sampling.
//!
//! The library couples a Gaussian-mixture prior built from an ensemble with
//! a closed-form posterior score and a reverse-time SDE sampler, wrapped in
//! an iterative refinement loop, alongside classical baselines (KF, EnKF,
//! LETKF, bootstrap PF) and a twin-experiment harness.

pub mod baselines;
pub mod diffusion;
pub mod ensemble;
pub mod error;
pub mod gaussian;
pub mod gm_prior;
pub mod iensf;
pub mod metrics;
pub mod models;
pub mod posterior_score;
pub mod rng;

pub use ensemble::Ensemble;
pub use error::{Error, Result};
