//! Preliminary estimators from the learning interval `[0, τ_ε]`, `τ_ε = ε^δ`.
//!
//! The generic estimator inverts the noise-free observation `x_τ(·)` at the
//! observed value `X_τ`; the two closed forms cover `f = θ·f_t` and
//! `a = θ·a_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{limit_xy, CaseTag, ModelSpec, TimeGrid, Var};
use crate::simulate::Trajectory;

/// Minimum number of integration steps used on `[0, τ_ε]`.
pub const MIN_LEARNING_STEPS: usize = 100;
const MONOTONE_MESH: usize = 21;

/// Estimator that consumes the learning interval; it determines the
/// admissible range of δ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Downstream {
    /// Preliminary estimate only.
    Preliminary,
    /// Preliminary estimate followed by a one-step correction.
    OneStep,
}

/// Upper end of the admissible δ range.
pub fn max_delta(case: CaseTag, usage: Downstream) -> f64 {
    match (case, usage) {
        (CaseTag::ThetaInF, Downstream::Preliminary) => 2.0,
        (CaseTag::ThetaInF, Downstream::OneStep) => 1.0,
        (CaseTag::ThetaInA, Downstream::Preliminary) => 2.0 / 3.0,
        (CaseTag::ThetaInA, Downstream::OneStep) => 1.0 / 3.0,
    }
}

fn constraint_name(case: CaseTag, usage: Downstream) -> &'static str {
    match (case, usage) {
        (CaseTag::ThetaInF, Downstream::Preliminary) => "(0, 2): consistency of the preliminary estimator",
        (CaseTag::ThetaInF, Downstream::OneStep) => "(0, 1): efficiency of the one-step estimator",
        (CaseTag::ThetaInA, Downstream::Preliminary) => {
            "(0, 2/3): preliminary rate when theta enters only the state drift"
        }
        (CaseTag::ThetaInA, Downstream::OneStep) => {
            "(0, 1/3): one-step efficiency when theta enters only the state drift"
        }
    }
}

/// `τ_ε = ε^δ`, capped at `T/2`.
pub fn learning_interval(eps: f64, delta: f64, horizon: f64, case: CaseTag, usage: Downstream) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::input(format!("eps = {eps} must lie in (0, 1)")));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::input(format!("horizon T = {horizon} must be positive")));
    }
    let hi = max_delta(case, usage);
    if !(delta > 0.0 && delta < hi) {
        return Err(Error::input(format!(
            "delta = {delta} violates the admissible range {}",
            constraint_name(case, usage)
        )));
    }
    Ok(eps.powf(delta).min(0.5 * horizon))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    ClampedLow,
    Interior,
    ClampedHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrelimResult {
    pub theta_bar: f64,
    /// Learning horizon actually used, i.e. `τ_ε` snapped to a grid node.
    pub tau_eps: f64,
    /// Grid node of `tau_eps`.
    pub node: usize,
    pub branch: Branch,
    pub solver_iters: usize,
}

impl PrelimResult {
    pub fn is_clamped(&self) -> bool {
        self.branch != Branch::Interior
    }
}

/// Snaps `τ` to the nearest positive node of `grid`.
pub fn learning_node(grid: &TimeGrid, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < grid.horizon) {
        return Err(Error::input(format!("learning horizon {tau} outside (0, {})", grid.horizon)));
    }
    Ok(grid.nearest(tau).clamp(1, grid.n_steps - 1))
}

fn clamp_result(model: &ModelSpec, raw: f64, tau: f64, node: usize, iters: usize) -> PrelimResult {
    let (theta_bar, branch) = if raw <= model.theta_lo {
        (model.theta_lo, Branch::ClampedLow)
    } else if raw >= model.theta_hi {
        (model.theta_hi, Branch::ClampedHigh)
    } else {
        (raw, Branch::Interior)
    };
    PrelimResult { theta_bar, tau_eps: tau, node, branch, solver_iters: iters }
}

/// Inverse of `θ ↦ x_τ(θ)` on `[α, β]` for one learning horizon. Building it
/// checks monotonicity once; [`Inverter::invert`] can then be applied to many
/// observed values.
#[derive(Debug, Clone)]
pub struct Inverter<'m> {
    model: &'m ModelSpec,
    tau: f64,
    node: usize,
    steps: usize,
    increasing: bool,
    x_lo: f64,
    x_hi: f64,
}

impl<'m> Inverter<'m> {
    pub fn new(model: &'m ModelSpec, grid: &TimeGrid, tau: f64) -> Result<Self> {
        let node = learning_node(grid, tau)?;
        let tau = grid.t(node);
        let steps = node.max(MIN_LEARNING_STEPS);
        let xs = model
            .theta_mesh(MONOTONE_MESH)
            .map(|th| limit_xy(model, th, tau, steps).map(|(x, _)| x))
            .collect::<Result<Vec<f64>>>()?;
        let up = xs.windows(2).all(|w| w[1] > w[0]);
        let down = xs.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(Error::Assumption(format!(
                "x_tau(theta) is not monotone on [{}, {}] at tau = {tau}",
                model.theta_lo, model.theta_hi
            )));
        }
        Ok(Inverter { model, tau, node, steps, increasing: up, x_lo: xs[0], x_hi: xs[MONOTONE_MESH - 1] })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn node(&self) -> usize {
        self.node
    }

    fn x_at(&self, theta: f64) -> Result<f64> {
        limit_xy(self.model, theta, self.tau, self.steps).map(|(x, _)| x)
    }

    /// Solves `x_τ(μ) = target` by bisection, clamping outside the range.
    pub fn invert(&self, target: f64) -> Result<PrelimResult> {
        let m = self.model;
        let (lo_x, hi_x) = if self.increasing { (self.x_lo, self.x_hi) } else { (self.x_hi, self.x_lo) };
        let (at_low_x, at_high_x) = if self.increasing { (m.theta_lo, m.theta_hi) } else { (m.theta_hi, m.theta_lo) };
        if target <= lo_x {
            return Ok(clamp_result(m, at_low_x, self.tau, self.node, 0));
        }
        if target >= hi_x {
            return Ok(clamp_result(m, at_high_x, self.tau, self.node, 0));
        }
        let tol = 1e-12 * (m.theta_hi - m.theta_lo);
        let (mut a, mut b) = (m.theta_lo, m.theta_hi);
        let mut iters = 0;
        while b - a > tol {
            let mid = 0.5 * (a + b);
            let above = self.x_at(mid)? > target;
            if above == self.increasing {
                b = mid;
            } else {
                a = mid;
            }
            iters += 1;
        }
        Ok(clamp_result(m, 0.5 * (a + b), self.tau, self.node, iters))
    }
}

/// Generic preliminary estimator: `x_τ(θ̄) = X_τ` with clamping to `[α, β]`.
pub fn estimate_generic(model: &ModelSpec, traj: &Trajectory, tau_eps: f64) -> Result<PrelimResult> {
    let inv = Inverter::new(model, &traj.grid, tau_eps)?;
    inv.invert(traj.x[inv.node()])
}

fn check_theta_free(model: &ModelSpec, expr: &crate::model::Coefficient, name: &str) -> Result<()> {
    if expr.expr.depends_on(Var::Theta) {
        return Err(Error::input(format!("{name} must not depend on theta for this estimator (case {:?})", model.case_tag)));
    }
    Ok(())
}

/// Checks `c(θ,t) = θ·∂θ c(θ,t)` on a mesh, i.e. `c` is linear in θ through the origin.
fn check_multiplicative(model: &ModelSpec, c: &crate::model::Coefficient, name: &str) -> Result<()> {
    for th in model.theta_mesh(11) {
        for i in 0..=20 {
            let t = model.horizon * i as f64 / 20.0;
            let v = c.value(th, t);
            if (v - th * c.dtheta(th, t)).abs() > 1e-9 * (1.0 + v.abs()) {
                return Err(Error::input(format!("{name} is not of the form theta * g(t)")));
            }
        }
    }
    Ok(())
}

/// `θ̄ = X_τ / ∫₀^τ f_s y_s ds` for `f(θ,t) = θ·f_t` with θ-free `a`.
pub fn estimate_example1(model: &ModelSpec, traj: &Trajectory, tau_eps: f64) -> Result<PrelimResult> {
    check_multiplicative(model, &model.f, "f")?;
    check_theta_free(model, &model.a, "a")?;
    let node = learning_node(&traj.grid, tau_eps)?;
    let tau = traj.grid.t(node);
    // ∫ f_t y_t over [0, τ] is x_τ at θ = 1.
    let (denom, _) = limit_xy(model, 1.0, tau, node.max(MIN_LEARNING_STEPS))?;
    if denom.abs() < 1e-300 {
        return Err(Error::Degenerate(format!("integral of f_t y_t over [0, {tau}] vanishes")));
    }
    Ok(clamp_result(model, traj.x[node] / denom, tau, node, 0))
}

/// `θ̄ = 2(X_τ − y0 ∫₀^τ f_s ds) / (f₀ a₀ y0 τ²)` for θ-free `f` and `a(θ,t) = θ·a_t`.
pub fn estimate_example2(model: &ModelSpec, traj: &Trajectory, tau_eps: f64) -> Result<PrelimResult> {
    check_theta_free(model, &model.f, "f")?;
    check_multiplicative(model, &model.a, "a")?;
    let node = learning_node(&traj.grid, tau_eps)?;
    let tau = traj.grid.t(node);
    let f0 = model.f.value(0.0, 0.0);
    let a0 = model.a.dtheta(0.0, 0.0);
    let scale = f0 * a0 * model.y0;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Assumption(format!("f(0) a(0) y0 = {scale} must be nonzero")));
    }
    let n = node.max(MIN_LEARNING_STEPS);
    let h = tau / n as f64;
    let int_f: f64 = (0..n)
        .map(|i| 0.5 * h * (model.f.value(0.0, tau * i as f64 / n as f64) + model.f.value(0.0, tau * (i + 1) as f64 / n as f64)))
        .sum();
    let raw = 2.0 * (traj.x[node] - model.y0 * int_f) / (scale * tau * tau);
    Ok(clamp_result(model, raw, tau, node, 0))
}
