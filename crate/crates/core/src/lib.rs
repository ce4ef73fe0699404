//! Physics-informed Gaussian-process regression.
//!
//! A GP prior is placed jointly over the target function at the training
//! inputs and over the derivatives (and latent source terms) that a
//! differential equation needs at a set of collocation points. The
//! covariances between derivatives come from differentiating the SE-ARD
//! kernel. Observations enter through a Gaussian noise likelihood and the
//! equation enters through a "virtual" Gaussian likelihood on a zero
//! residual. Inference is whitened stochastic variational inference.
//!
//! Module map:
//!
//! - [`linalg`]: dense symmetric linear algebra, jittered Cholesky and its adjoint
//! - [`kernel`]: SE-ARD kernel and closed-form derivative covariances
//! - [`equation`]: residual expression trees, presets and the text schema
//! - [`model`]: joint prior layout, covariance assembly and log-likelihoods
//! - [`infer`]: ELBO, its gradients, Adam and the training loop
//! - [`predict`]: posterior predictive distributions and metrics
//! - [`baseline`]: exact GP regression
//! - [`simulate`]: ground-truth solvers and dataset sampling

pub mod baseline;
pub mod equation;
pub mod error;
pub mod infer;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod par;
pub mod predict;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
