//! Hierarchical Gaussian-process functional autoregression.
//!
//! Curves observed sparsely and with noise are modeled as
//! `y_t = Z_t mu + Z_t mu_t + nu_t` with `mu_t = sum_l s_l Psi_l Q mu_{t-l} + eps_t`,
//! a dynamic linear model on a fixed evaluation grid. The crate provides the
//! state-space engine, the factor model for the innovation covariance, the
//! Gibbs sampler, simulation designs, rival forecasters and study tooling.

pub mod basis;
pub mod bench;
pub mod error;
pub mod far;
pub mod fdlm;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod rivals;
pub mod simlab;
pub mod special;
pub mod ssm;

pub use error::{Error, Result};
