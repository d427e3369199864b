//! Robust (integration-by-parts) form of the filter's stochastic integral.
//!
//! From `τ_ε` with initial value `y0` the filter mean is
//! `m(θ,t) = y0 N(θ,t) + N(θ,t) ∫_τ^t F(θ,s) dX_s`, where
//! `N = exp ∫_τ^t (a − γ* f²/σ²)`, `Q = γ* f/σ²` and `F = Q/N`. Rewriting the
//! integral as `F(t)X_t − F(τ)X_τ − ∫ F' X ds` gives `G(θ,X,t)`, which stays
//! well defined when a random θ is plugged in.

use serde::Serialize;

use super::EstimatorProcess;
use crate::error::{Error, Result};
use crate::kbfilter::{riccati_rhs, solve_riccati, Riccati};
use crate::model::ModelSpec;
use crate::ode::cumulative_trapezoid;
use crate::prelim::learning_node;
use crate::simulate::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MStarResult {
    pub t: f64,
    pub m_star: f64,
    pub n_val: f64,
    pub g_val: f64,
    /// Parameter value the formula was evaluated at.
    pub theta: f64,
}

/// `(ln N(θ,t), G(θ,X,t))` over nodes `k_tau..=k_t`.
pub(crate) fn robust_terms(
    model: &ModelSpec,
    ric: &Riccati,
    traj: &Trajectory,
    k_tau: usize,
    k_t: usize,
) -> Result<(f64, f64)> {
    if ric.grid != traj.grid {
        return Err(Error::input("Riccati solution and trajectory use different grids"));
    }
    if !(k_tau < k_t && k_t <= traj.grid.n_steps) {
        return Err(Error::input(format!("robust integral needs tau < t, got nodes {k_tau} and {k_t}")));
    }
    let h = traj.grid.h();
    let theta = ric.theta;
    let len = k_t - k_tau + 1;
    let mut drift = Vec::with_capacity(len);
    let mut q = Vec::with_capacity(len);
    let mut q_prime = Vec::with_capacity(len);
    for k in k_tau..=k_t {
        let c = &ric.coeffs[k];
        let t = traj.grid.t(k);
        let g = ric.gamma_star[k];
        let s2 = c.sigma * c.sigma;
        let g_prime = riccati_rhs(c, g, 0.0).0;
        let f_t = model.f.dt(theta, t);
        let sigma_t = model.sigma.dt(theta, t);
        drift.push(c.a - g * c.f * c.f / s2);
        q.push(ric.d[k]);
        q_prime.push((g_prime * c.f + g * f_t) / s2 - 2.0 * g * c.f * sigma_t / (s2 * c.sigma));
    }
    let ln_n = cumulative_trapezoid(&drift, h);
    let mut integrand = Vec::with_capacity(len);
    let mut f_vals = Vec::with_capacity(len);
    for i in 0..len {
        let inv_n = (-ln_n[i]).exp();
        f_vals.push(q[i] * inv_n);
        integrand.push((q_prime[i] - q[i] * drift[i]) * inv_n * traj.x[k_tau + i]);
    }
    let tail = *cumulative_trapezoid(&integrand, h).last().unwrap();
    let g_val = f_vals[len - 1] * traj.x[k_t] - f_vals[0] * traj.x[k_tau] - tail;
    let ln_nt = ln_n[len - 1];
    if !(g_val.is_finite() && ln_nt.is_finite()) || ln_nt.abs() > 700.0 {
        return Err(Error::Rescaling(format!(
            "ln N = {ln_nt} at t = {} leaves the representable range",
            traj.grid.t(k_t)
        )));
    }
    Ok((ln_nt, g_val))
}

/// `G(θ,X,t) = F(θ,t)X_t − F(θ,τ)X_τ − ∫_τ^t F'(θ,s) X_s ds`, with `τ` and `t`
/// snapped to grid nodes.
pub fn robust_integral_g(model: &ModelSpec, theta: f64, traj: &Trajectory, tau_eps: f64, t: f64) -> Result<f64> {
    let k_tau = learning_node(&traj.grid, tau_eps)?;
    let k_t = traj.grid.nearest(t);
    let ric = solve_riccati(model, theta, &traj.grid)?;
    robust_terms(model, &ric, traj, k_tau, k_t).map(|(_, g)| g)
}

pub(crate) fn evaluate(model: &ModelSpec, ric: &Riccati, traj: &Trajectory, k_tau: usize, k_t: usize) -> Result<MStarResult> {
    let (ln_n, g_val) = robust_terms(model, ric, traj, k_tau, k_t)?;
    let n_val = ln_n.exp();
    let m = model.y0 * n_val + n_val * g_val;
    if !m.is_finite() {
        return Err(Error::Rescaling(format!("m* is not finite at t = {}", traj.grid.t(k_t))));
    }
    Ok(MStarResult { t: traj.grid.t(k_t), m_star: m, n_val, g_val, theta: ric.theta })
}

/// `m(θ,t) = y0 N(θ,t) + N(θ,t) G(θ,X,t)` at a fixed θ: the filter restarted
/// at `τ_ε` from `y0`. This is the reference `m*` is compared against.
pub fn m_fixed(model: &ModelSpec, theta: f64, traj: &Trajectory, tau_eps: f64, t: f64) -> Result<MStarResult> {
    let k_tau = learning_node(&traj.grid, tau_eps)?;
    let ric = solve_riccati(model, theta, &traj.grid)?;
    evaluate(model, &ric, traj, k_tau, traj.grid.nearest(t))
}

/// `m*_ε(t) = y0 N(θ*,t) + N(θ*,t) G(θ*,X,t)` with `θ* = θ*_{t,ε}` projected
/// onto `[α, β]`.
pub fn m_star(model: &ModelSpec, traj: &Trajectory, process: &EstimatorProcess, t: f64) -> Result<MStarResult> {
    if process.grid != traj.grid {
        return Err(Error::input("estimator process and trajectory use different grids"));
    }
    let k_t = traj.grid.nearest(t);
    let theta = process
        .at_node(k_t)
        .ok_or_else(|| Error::input(format!("no one-step estimate available at t = {t}")))?
        .clamp(model.theta_lo, model.theta_hi);
    let ric = solve_riccati(model, theta, &traj.grid)?;
    evaluate(model, &ric, traj, process.k_tau(), k_t)
}

pub fn m_star_series(
    model: &ModelSpec,
    traj: &Trajectory,
    process: &EstimatorProcess,
    times: &[f64],
) -> Result<Vec<MStarResult>> {
    times.iter().map(|&t| m_star(model, traj, process, t)).collect()
}

pub fn m_star_csv(rows: &[MStarResult]) -> String {
    let mut out = String::from("t,m_star,N,G\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.t, r.m_star, r.n_val, r.g_val));
    }
    out
}
