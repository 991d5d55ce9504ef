//! Simulation toolkit for stress-testing mixed-effects model estimation
//! under controlled data imbalance.
//!
//! The library generates hierarchical datasets with known ground truth,
//! fits them with a frequentist mixed-model pipeline (profiled REML for
//! the Gaussian family, Laplace-approximated maximum likelihood for the
//! logistic family) and with a Bayesian hierarchical sampler (NUTS), and
//! records convergence, rank, and estimation-error diagnostics for
//! downstream tabulation.

pub mod balance;
pub mod bayesfit;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod freqfit;
pub mod report;
pub mod runner;
pub mod stochastic;
#[cfg(test)]
pub(crate) mod testutil;
pub mod truemodel;

pub use error::{Error, Result};
