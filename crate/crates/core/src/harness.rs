//! Config-driven experiment runner: static Bayesian-update scenarios, the
//! harmonic-oscillator study, Lorenz-96 twin experiments, grid search over
//! inflation/localization/variance-split, and CSV emission.

mod config;
mod grid;
mod runner;

pub use config::{
    EnsfBlock, ExperimentConfig, ExperimentKind, GmBlock, GridSpec, IensfBlock, IntegratorBlock,
    Lorenz96Block, Method, ObsBlock, ObsKindName,
};
pub use grid::{grid_search, GridCell, GridSearchOutcome, MethodWinner};
pub use runner::{
    run_experiment, write_csv, write_summary, ExperimentOutput, MethodSummary, ResultRow,
};
