//! Small-noise parameter estimation for partially observed linear Gaussian
//! systems: Kalman–Bucy filtering, preliminary and one-step estimators,
//! adaptive filtering and a Monte Carlo harness.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fisher;
pub mod kbfilter;
pub mod mc;
pub mod model;
mod ode;
pub mod onestep;
pub mod prelim;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{CaseTag, ModelSpec, TimeGrid};
