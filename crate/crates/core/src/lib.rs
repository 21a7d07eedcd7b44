//! Solver library for a one-dimensional linear Cahn-Hilliard-Cook equation
//! driven by the space derivative of space-time white noise.
//!
//! The crate provides, in dependency order:
//!
//! - [`spectral`]: the sine eigensystem of the fourth-order operator,
//!   semigroup and elliptic solves, smoothness norms;
//! - [`noise`]: the regularized noise built from hat functions on a
//!   space-time grid, its Gram matrix, correlated Gaussian sampling, the
//!   slab/hat projection, and a coupled realization of the driving noise;
//! - [`femspace`]: C1 spline finite element spaces (quadratic B-splines and
//!   Hermite cubics) with exact assembly;
//! - [`evolve`]: Backward Euler time stepping, deterministic and
//!   stochastic, spectral and fully discrete, plus exact evaluators of the
//!   regularized and truncated-mode solutions;
//! - [`error_analysis`]: exact second-moment error engines by covariance
//!   propagation, Monte Carlo estimators with common random numbers, and
//!   log-log rate fitting;
//! - [`experiments`]: the experiment drivers behind the command line
//!   interface and the acceptance suite.

pub mod error;
pub mod error_analysis;
pub mod evolve;
pub mod experiments;
pub mod femspace;
pub mod linalg;
pub mod noise;
pub mod quad;
pub mod rng;
pub mod spectral;

pub use error::{CoreError, Result};
pub use spectral::{ModelParams, SpectralField};
