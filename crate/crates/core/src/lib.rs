//! Robust Bayesian source imaging for linear inverse problems `B = G J + E`.
//!
//! * [`likelihood`]: the correntropy-induced improper noise density and
//!   score-matching estimation of its hyperparameters.
//! * [`sim`]: synthetic leadfields, sparse sources and heavy-tailed noise.
//! * [`hvb`]: hierarchical variational Bayes with a Gaussian likelihood.
//! * [`chvb`]: the same hierarchy under the correntropy likelihood.
//! * [`metrics`]: SNR, RMSE, spatial/temporal correlation and paired tests.

pub mod chvb;
pub mod error;
pub mod hvb;
pub mod likelihood;
pub(crate) mod linalg;
pub mod metrics;
pub mod sim;

pub use error::{EsiError, Result};
