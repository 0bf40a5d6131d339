//! Asymptotics of ridge-regularized robust regression M-estimators.
//!
//! The crate has two halves. [`fixed_point`] solves the two-equation system
//! in `(r, c)` that predicts the limit of `||beta_hat||` and of the normalized
//! curvature trace when `p / n -> kappa`. [`estimator`] and [`diagnostics`]
//! fit the finite-sample problem
//!
//! ```text
//! beta_hat = argmin (1/n) sum_i rho(eps_i - X_i' beta) + (tau / 2) ||beta||^2
//! ```
//!
//! and measure how closely it follows those predictions, including the
//! leave-one-observation-out and leave-one-predictor-out approximations.
//! [`harness`] drives seeded replication grids from a TOML config.

// Guards like `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod fixed_point;
pub mod harness;
pub mod losses;
mod model_text;
pub mod noise;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
pub use estimator::{fit, gen_design, Design, EntryLaw, FitOptions, FitResult};
pub use fixed_point::{solve_system, SystemSolution};
pub use losses::{loss_catalog, prox, LossModel, ProxValue};
pub use noise::{ConvolvedLaw, NoiseModel, QuadratureSettings};
