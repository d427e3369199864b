//! Fisher information queries and the efficiency bound for estimating the
//! conditional mean.
//!
//! All flavours read one cumulative array from [`limit_system`], so windowed
//! values are plain differences.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{fisher_window, limit_system, DeterministicLimit, ModelSpec, TimeGrid};

/// `I(θ) = I_0^T(θ)`.
pub fn fisher_information(model: &ModelSpec, theta: f64, grid: &TimeGrid) -> Result<f64> {
    Ok(limit_system(model, theta, grid)?.fisher_total())
}

/// `I_τ(θ) = I_τ^T(θ)`.
pub fn fisher_from(model: &ModelSpec, theta: f64, grid: &TimeGrid, tau: f64) -> Result<f64> {
    let lim = limit_system(model, theta, grid)?;
    fisher_window(&lim, tau, grid.horizon)
}

/// Right side of the lower bound on `ε⁻² E|m̂(t) − m(θ₀,t)|²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EfficiencyBound {
    pub t: f64,
    /// `ẏ(θ₀,t)² / I_0^t(θ₀)`.
    pub bound: f64,
    pub theta0: f64,
    pub ydot: f64,
    pub fisher: f64,
}

pub fn mse_lower_bound(model: &ModelSpec, theta0: f64, t: f64, grid: &TimeGrid) -> Result<EfficiencyBound> {
    let lim = limit_system(model, theta0, grid)?;
    bound_from_limit(model, &lim, t)
}

pub fn bound_from_limit(model: &ModelSpec, lim: &DeterministicLimit, t: f64) -> Result<EfficiencyBound> {
    if !(t > 0.0 && t <= lim.grid.horizon) {
        return Err(Error::input(format!("bound time {t} outside (0, {}]", lim.grid.horizon)));
    }
    let fisher = fisher_window(lim, 0.0, t)?;
    let floor = model.fisher_floor();
    if !(fisher >= floor) {
        return Err(Error::SingularInformation { value: fisher, floor });
    }
    let ydot = lim.ydot_at(t);
    Ok(EfficiencyBound { t, bound: ydot * ydot / fisher, theta0: lim.theta, ydot, fisher })
}
