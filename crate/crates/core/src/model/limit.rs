use serde::Serialize;

use super::{CaseTag, CoeffPoint, ModelSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::kbfilter::riccati_rhs;
use crate::ode::{cumulative_trapezoid, rk4_step};

/// Noise-free solution of the system at a fixed θ together with the
/// θ-sensitivity of the limiting filter and the cumulative Fisher information.
#[derive(Debug, Clone, Serialize)]
pub struct DeterministicLimit {
    pub grid: TimeGrid,
    pub theta: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// θ-derivative of the noise-free filter mean.
    pub ydot: Vec<f64>,
    /// Score direction `Ṁ`: `ḟ y + f ẏ`, or `f ẏ` when θ sits in the state drift.
    pub mdot: Vec<f64>,
    /// `∫₀ᵗ (Ṁ/σ)² ds` at each node.
    pub fisher_cum: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub d: Vec<f64>,
    #[serde(skip)]
    pub(crate) gamma_star_dot: Vec<f64>,
    #[serde(skip)]
    pub(crate) node_coeffs: Vec<CoeffPoint>,
}

/// Integrates `x' = f y`, `y' = a y`, the rescaled Riccati equation with its
/// θ-derivative, and `ẏ' = (a − D f) ẏ + (ȧ − D ḟ) y` in one RK4 sweep.
pub fn limit_system(model: &ModelSpec, theta: f64, grid: &TimeGrid) -> Result<DeterministicLimit> {
    let n = grid.n_steps;
    let h = grid.h();
    let mut x = Vec::with_capacity(n + 1);
    let mut y = Vec::with_capacity(n + 1);
    let mut ydot = Vec::with_capacity(n + 1);
    let mut gamma = Vec::with_capacity(n + 1);
    let mut gamma_dot = Vec::with_capacity(n + 1);
    let mut node_coeffs = Vec::with_capacity(n + 1);
    let mut d = Vec::with_capacity(n + 1);
    let mut mdot = Vec::with_capacity(n + 1);
    let mut integrand = Vec::with_capacity(n + 1);

    let rhs = |c: &CoeffPoint, s: &[f64; 5]| {
        let [g, gd, _x, yv, yd] = *s;
        let (dg, dgd) = riccati_rhs(c, g, gd);
        let gain = g * c.f / (c.sigma * c.sigma);
        [dg, dgd, c.f * yv, c.a * yv, (c.a - gain * c.f) * yd + (c.a_dot - gain * c.f_dot) * yv]
    };

    let mut state = [0.0, 0.0, 0.0, model.y0, 0.0];
    let mut left = model.coeffs(theta, 0.0);
    for k in 0..=n {
        let [g, gd, xv, yv, yd] = state;
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { what: "limit system", node: k, t: grid.t(k) });
        }
        let c = left;
        let s2 = c.sigma * c.sigma;
        let md = match model.case_tag {
            CaseTag::ThetaInF => c.f_dot * yv + c.f * yd,
            CaseTag::ThetaInA => c.f * yd,
        };
        x.push(xv);
        y.push(yv);
        ydot.push(yd);
        gamma.push(g);
        gamma_dot.push(gd);
        node_coeffs.push(c);
        d.push(g * c.f / s2);
        mdot.push(md);
        integrand.push(md * md / s2);
        if k == n {
            break;
        }
        let t = grid.t(k);
        let mid = model.coeffs(theta, t + 0.5 * h);
        let right = model.coeffs(theta, grid.t(k + 1));
        state = rk4_step(h, &state, &left, &mid, &right, rhs);
        left = right;
    }
    let fisher_cum = cumulative_trapezoid(&integrand, h);
    if let Some(k) = fisher_cum.iter().position(|v| !v.is_finite()) {
        return Err(Error::Overflow { what: "Fisher information", node: k, t: grid.t(k) });
    }
    Ok(DeterministicLimit {
        grid: *grid,
        theta,
        x,
        y,
        ydot,
        mdot,
        fisher_cum,
        gamma_star: gamma,
        d,
        gamma_star_dot: gamma_dot,
        node_coeffs,
    })
}

/// Noise-free `(x_τ(θ), y_τ(θ))` by RK4 with `n_steps` uniform steps on `[0, τ]`.
pub fn limit_xy(model: &ModelSpec, theta: f64, tau: f64, n_steps: usize) -> Result<(f64, f64)> {
    if !(tau > 0.0) || n_steps == 0 {
        return Err(Error::input(format!("limit_xy needs tau > 0 and at least one step, got {tau}, {n_steps}")));
    }
    let h = tau / n_steps as f64;
    let fa = |t: f64| (model.f.value(theta, t), model.a.value(theta, t));
    let rhs = |c: &(f64, f64), s: &[f64; 2]| [c.0 * s[1], c.1 * s[1]];
    let mut state = [0.0, model.y0];
    let mut left = fa(0.0);
    for k in 0..n_steps {
        let t = tau * k as f64 / n_steps as f64;
        let mid = fa(t + 0.5 * h);
        let right = fa(tau * (k + 1) as f64 / n_steps as f64);
        state = rk4_step(h, &state, &left, &mid, &right, rhs);
        left = right;
    }
    if !(state[0].is_finite() && state[1].is_finite()) {
        return Err(Error::Overflow { what: "limit x/y", node: n_steps, t: tau });
    }
    Ok((state[0], state[1]))
}

/// `I_τ^t(θ) = ∫_τ^t (Ṁ/σ)² ds`, linearly interpolated between nodes.
pub fn fisher_window(limit: &DeterministicLimit, tau: f64, t: f64) -> Result<f64> {
    if !(tau < t) {
        return Err(Error::input(format!("Fisher window needs tau < t, got [{tau}, {t}]")));
    }
    if tau < 0.0 || t > limit.grid.horizon * (1.0 + 1e-12) {
        return Err(Error::input(format!("Fisher window [{tau}, {t}] outside [0, {}]", limit.grid.horizon)));
    }
    Ok(limit.grid.interpolate(&limit.fisher_cum, t) - limit.grid.interpolate(&limit.fisher_cum, tau))
}

impl DeterministicLimit {
    /// `I(θ) = I_0^T(θ)`.
    pub fn fisher_total(&self) -> f64 {
        *self.fisher_cum.last().unwrap()
    }

    /// `I_τ^T(θ)` using node values; `k_tau` is the node of the learning horizon.
    pub fn fisher_from_node(&self, k_tau: usize) -> f64 {
        self.fisher_total() - self.fisher_cum[k_tau]
    }

    pub fn ydot_at(&self, t: f64) -> f64 {
        self.grid.interpolate(&self.ydot, t)
    }
}
