//! Joint state and parameter estimation for parameter-affine linear Gaussian
//! state-space models.
//!
//! The model is
//!
//! ```text
//! x_{k+1} = F(θ) x_k + v_k,   v_k ~ N(0, Q)
//! y_k     = H(θ) x_k + e_k,   e_k ~ N(0, R)
//! F(θ) = F_0 + Σ θ_i F_i,     H(θ) = H_0 + Σ θ_i H_i
//! ```
//!
//! Four joint estimators are provided on top of a shared block regression
//! system ([`batch::BatchSystem`]) and a Kalman/RTS smoother
//! ([`smoother`]):
//!
//! - [`estimators::peiv`]: partial errors-in-variables estimator. The
//!   parameter prior enters as a Tikhonov-style regularizer and the state and
//!   parameter are updated by alternating smoothing and regularized least
//!   squares.
//! - [`estimators::jmap_ml`]: joint MAP (states) / ML (parameter) coordinate
//!   iteration.
//! - [`estimators::em`]: expectation maximization with exact expectations
//!   from the smoothed marginal and lag-one covariances.
//! - [`estimators::aseks`]: augmented-state extended Kalman smoother.
//!
//! [`montecarlo`] runs seeded replications of all of them and summarizes the
//! errors (RMSE, quantiles, error ellipses).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod blocktri;
mod error;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod smoother;

pub use error::{Error, Result};

pub use batch::{assemble, BatchSystem, BlockSparse};
pub use blocktri::{BlockTridiag, StateCovariance};
pub use estimators::{
    aseks, em, estimate, jmap_ml, param_ls, peiv, AseksConfig, IterConfig, JointEstimate, Method,
};
pub use model::{simulate, stationary_cov, GaussianDensity, ParamAffineModel, Trajectory};
pub use montecarlo::{
    error_ellipse, quantiles, run_mc, ErrorEllipse, McConfig, McReport, McRow, StatePrior,
};
pub use smoother::{loglik, smooth_batch, smooth_rts, SmoothResult};

pub use nalgebra::{DMatrix, DVector};
