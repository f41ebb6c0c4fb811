//! Filtering, retrofiltering and quantum state smoothing for linear
//! Gaussian quantum systems.
//!
//! Modules build on each other bottom-up: [`linalg`] (symmetric-matrix and
//! Riccati kernels), [`model`] (systems and Gaussian states), [`trajectory`]
//! (true-state simulation), [`estimation`] (filter, retrofilter, smoother),
//! [`steady`] (stationary solutions and efficiency asymptotics),
//! [`analysis`] (sweeps and Monte-Carlo checks) and [`io`] (artifacts).

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod estimation;
pub mod io;
pub mod linalg;
pub mod model;
pub mod steady;
pub mod trajectory;

pub use error::{Error, Result};
pub use linalg::{Matrix, SymMatrix, Vector};
pub use model::{build_opo, GaussianState, LgqSystem, OpoParams, StateLabel};
pub use trajectory::{MeasurementRecord, TimeGrid};
