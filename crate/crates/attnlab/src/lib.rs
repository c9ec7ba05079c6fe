//! Numerical lab for gradient-flow training of one-layer multi-head softmax
//! attention on in-context multi-task linear regression.
//!
//! The crate holds the full-parameter Monte Carlo gradient flow, the reduced
//! spectral dynamics on per-task eigenvalues, Monte Carlo oracles for softmax
//! moments, closed-form optimality bounds and transfer evaluators.

pub mod attention_core;
pub mod data_model;
pub mod flow_engine;
pub mod moments_lab;
pub mod ode;
pub mod optimality_suite;
pub mod rng;
pub mod spectral_engine;
pub mod stats;
pub mod transfer_eval;

pub use stats::MomentEstimate;

/// Errors surfaced by the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input: bad dimensions, bad spec, violated precondition.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Non-finite values or a diverging run.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
