//! Variational Bayes for models whose likelihood is an intractable expectation
//! `p(y*|θ) = E[f(x; y*) | θ]` that can only be estimated by simulation.
//!
//! The crate is organised bottom-up:
//!
//! - [`qmc`]: pseudorandom and Owen-scrambled Sobol point streams.
//! - [`numerics`]: special functions and small dense linear algebra.
//! - [`mlmc`]: the randomized single-term multilevel estimator with antithetic
//!   couplings for the log-likelihood and its gradient.
//! - [`gaussian`]: the Gaussian variational family in its precision-Cholesky
//!   (score-function) and covariance-Cholesky (reparameterization) forms.
//! - [`models`]: the model abstraction and the toy ABC, g-and-k ABC and
//!   random-intercept logistic GLMM models.
//! - [`baselines`]: biased plug-in (VBIL) gradients, the unbiased Gaussian
//!   synthetic log-likelihood and acceptance-rejection ABC.
//! - [`engine`]: the stochastic-gradient driver, diagnostics, configuration,
//!   persistence and the command-line front end.

pub mod baselines;
pub mod engine;
pub mod gaussian;
pub mod mlmc;
pub mod models;
pub mod numerics;
pub mod qmc;

mod error;

pub use error::{Error, Result};
