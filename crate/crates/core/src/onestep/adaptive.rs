//! Filter with the running estimate `θ*_{t,ε}` plugged into its coefficients.

use serde::{Deserialize, Serialize};

use super::EstimatorProcess;
use crate::error::{Error, Result};
use crate::kbfilter::{riccati_rhs, run_filter_cached, solve_riccati, Riccati};
use crate::model::{CoeffPoint, ModelSpec, TimeGrid};
use crate::ode::rk4_step;
use crate::simulate::Trajectory;

/// Value of `γ*` when the adaptive recursion takes over at `τ_ε`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptiveInit {
    /// Continue from the `θ̄` filter's `γ*(τ_ε)`.
    #[default]
    WarmStart,
    /// Restart at `γ* = 0`.
    Restart,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveFilterOutput {
    pub grid: TimeGrid,
    /// Node of `τ_ε`; earlier values come from the fixed-`θ̄` filter.
    pub start_node: usize,
    pub m_star: Vec<f64>,
    pub gamma_star_adaptive: Vec<f64>,
    pub theta_used: Vec<f64>,
}

/// Runs the adaptive filter. The warm-up on `[0, τ_ε]` is the filter at
/// `process.theta_bar`; from `τ_ε` on, each Euler step uses the latest
/// process value projected onto `[α, β]` (or `θ̄` until the first estimate).
pub fn adaptive_filter(
    model: &ModelSpec,
    traj: &Trajectory,
    process: &EstimatorProcess,
    init: AdaptiveInit,
) -> Result<AdaptiveFilterOutput> {
    let ric = solve_riccati(model, process.theta_bar, &traj.grid)?;
    adaptive_filter_from(model, traj, process, &ric, init)
}

pub(crate) fn adaptive_filter_from(
    model: &ModelSpec,
    traj: &Trajectory,
    process: &EstimatorProcess,
    warm: &Riccati,
    init: AdaptiveInit,
) -> Result<AdaptiveFilterOutput> {
    if process.grid != traj.grid {
        return Err(Error::input("estimator process and trajectory use different grids"));
    }
    let grid = traj.grid;
    let n = grid.n_steps;
    let h = grid.h();
    let start = process.k_tau();
    let warm_filter = run_filter_cached(model, warm, traj, false)?;

    let mut m = warm_filter.m[..=start].to_vec();
    let mut gamma = warm.gamma_star[..=start].to_vec();
    let mut theta_used = vec![process.theta_bar; start + 1];
    m.reserve(n - start);
    gamma.reserve(n - start);
    theta_used.reserve(n - start);
    if init == AdaptiveInit::Restart {
        gamma[start] = 0.0;
    }

    let rhs = |c: &CoeffPoint, s: &[f64; 1]| [riccati_rhs(c, s[0], 0.0).0];
    let (mut mv, mut g) = (m[start], gamma[start]);
    for k in start..n {
        let theta = process.at_node(k).unwrap_or(process.theta_bar).clamp(model.theta_lo, model.theta_hi);
        let c = model.coeffs(theta, grid.t(k));
        let d = g * c.f / (c.sigma * c.sigma);
        let drift = c.a - d * c.f;
        let dx = traj.x[k + 1] - traj.x[k];
        mv += drift * mv * h + d * dx;
        let mid = model.coeffs(theta, grid.t(k) + 0.5 * h);
        let right = model.coeffs(theta, grid.t(k + 1));
        g = rk4_step(h, &[g], &c, &mid, &right, rhs)[0];
        if !(mv.is_finite() && g.is_finite()) {
            return Err(Error::Integration { what: "adaptive filter", node: k + 1, t: grid.t(k + 1) });
        }
        m.push(mv);
        gamma.push(g);
        theta_used[k] = theta;
        theta_used.push(theta);
    }
    Ok(AdaptiveFilterOutput { grid, start_node: start, m_star: m, gamma_star_adaptive: gamma, theta_used })
}

impl AdaptiveFilterOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,m_star,gamma_star,theta\n");
        for k in 0..self.m_star.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.grid.t(k),
                self.m_star[k],
                self.gamma_star_adaptive[k],
                self.theta_used[k]
            ));
        }
        out
    }
}
