//! One-step MLE, its time-indexed process, the adaptive filter and the
//! robust estimator of the conditional mean.
//!
//! The correction is a single Fisher-scoring step from the preliminary value:
//!
//! ```text
//! θ* = θ̄ + I_τ(θ̄)⁻¹ Σ_{k ≥ k_τ} Ṁ(θ̄,t_k) σ(t_k)⁻² [ΔX_k − f(θ̄,t_k) m(θ̄,t_k) h]
//! ```
//!
//! with `m(θ̄,·)` the filter run once at `θ̄` over the whole path.

mod adaptive;
mod robust;

pub use adaptive::{adaptive_filter, AdaptiveFilterOutput, AdaptiveInit};
pub(crate) use adaptive::adaptive_filter_from;
pub(crate) use robust::evaluate as robust_evaluate;
pub use robust::{m_fixed, m_star, m_star_csv, m_star_series, robust_integral_g, MStarResult};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kbfilter::{run_filter_cached, FilterOutput, Riccati};
use crate::model::{limit_system, DeterministicLimit, ModelSpec, TimeGrid};
use crate::prelim::PrelimResult;
use crate::simulate::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OneStepResult {
    pub theta_star: f64,
    pub theta_bar: f64,
    /// Raw score sum; `theta_star = theta_bar + correction / fisher_used`.
    pub correction: f64,
    pub fisher_used: f64,
    /// Set when the preliminary estimate sat on the boundary of `[α, β]`.
    pub boundary_clamped: bool,
}

/// Everything the one-step constructions need at `θ̄`: the noise-free limit
/// (`Ṁ`, Fisher information), the Riccati solution and the filter over the
/// full path.
#[derive(Debug, Clone)]
pub struct OneStepContext {
    pub prelim: PrelimResult,
    pub limit: DeterministicLimit,
    pub riccati: Riccati,
    pub filter: FilterOutput,
}

impl OneStepContext {
    pub fn prepare(model: &ModelSpec, traj: &Trajectory, prelim: &PrelimResult) -> Result<Self> {
        check_prelim(&traj.grid, prelim)?;
        let limit = limit_system(model, prelim.theta_bar, &traj.grid)?;
        let riccati = Riccati::from_limit(&limit)?;
        let filter = run_filter_cached(model, &riccati, traj, false)?;
        Ok(OneStepContext { prelim: *prelim, limit, riccati, filter })
    }

    /// Score increments `Ṁσ⁻²[ΔX_k − f m h]` for `k ≥ k_τ`.
    fn score_terms<'a>(&'a self, traj: &'a Trajectory) -> impl Iterator<Item = f64> + 'a {
        let h = traj.grid.h();
        let k_tau = self.prelim.node;
        (k_tau..traj.grid.n_steps).map(move |k| {
            let c = &self.riccati.coeffs[k];
            let dx = traj.x[k + 1] - traj.x[k];
            self.limit.mdot[k] / (c.sigma * c.sigma) * (dx - c.f * self.filter.m[k] * h)
        })
    }

    pub fn estimate(&self, model: &ModelSpec, traj: &Trajectory) -> Result<OneStepResult> {
        let fisher = self.limit.fisher_from_node(self.prelim.node);
        let floor = model.fisher_floor();
        if !(fisher >= floor) {
            return Err(Error::SingularInformation { value: fisher, floor });
        }
        let mut correction = 0.0;
        for s in self.score_terms(traj) {
            correction += s;
        }
        Ok(OneStepResult {
            theta_star: self.prelim.theta_bar + correction / fisher,
            theta_bar: self.prelim.theta_bar,
            correction,
            fisher_used: fisher,
            boundary_clamped: self.prelim.is_clamped(),
        })
    }

    pub fn process(&self, model: &ModelSpec, traj: &Trajectory) -> Result<EstimatorProcess> {
        let k_tau = self.prelim.node;
        let floor = model.fisher_floor();
        let base = self.limit.fisher_cum[k_tau];
        let mut out = EstimatorProcess {
            grid: traj.grid,
            tau_eps: self.prelim.tau_eps,
            theta_bar: self.prelim.theta_bar,
            nodes: Vec::new(),
            theta_star: Vec::new(),
            fisher: Vec::new(),
        };
        let mut sum = 0.0;
        for (k, s) in (k_tau + 1..).zip(self.score_terms(traj)) {
            sum += s;
            let fisher = self.limit.fisher_cum[k] - base;
            if fisher >= floor {
                out.nodes.push(k);
                out.theta_star.push(self.prelim.theta_bar + sum / fisher);
                out.fisher.push(fisher);
            }
        }
        if out.nodes.is_empty() {
            return Err(Error::SingularInformation { value: self.limit.fisher_from_node(k_tau), floor });
        }
        Ok(out)
    }
}

fn check_prelim(grid: &TimeGrid, prelim: &PrelimResult) -> Result<()> {
    if prelim.node == 0 || prelim.node >= grid.n_steps || grid.t(prelim.node) != prelim.tau_eps {
        return Err(Error::input(format!(
            "preliminary estimate (tau = {}, node {}) was not computed on this trajectory's grid",
            prelim.tau_eps, prelim.node
        )));
    }
    Ok(())
}

pub fn one_step_mle(model: &ModelSpec, traj: &Trajectory, prelim: &PrelimResult) -> Result<OneStepResult> {
    OneStepContext::prepare(model, traj, prelim)?.estimate(model, traj)
}

/// Running one-step estimator `θ*_{t,ε}` on grid nodes past `τ_ε`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorProcess {
    pub grid: TimeGrid,
    pub tau_eps: f64,
    pub theta_bar: f64,
    /// Grid nodes carrying an estimate; nodes whose information `I_τ^t(θ̄)`
    /// is below the floor are omitted.
    pub nodes: Vec<usize>,
    pub theta_star: Vec<f64>,
    /// `I_τ^{t_k}(θ̄)` at each node.
    pub fisher: Vec<f64>,
}

pub fn one_step_process(model: &ModelSpec, traj: &Trajectory, prelim: &PrelimResult) -> Result<EstimatorProcess> {
    OneStepContext::prepare(model, traj, prelim)?.process(model, traj)
}

impl EstimatorProcess {
    pub fn k_tau(&self) -> usize {
        self.grid.nearest(self.tau_eps)
    }

    /// Latest estimate available at node `k`, if any.
    pub fn at_node(&self, k: usize) -> Option<f64> {
        match self.nodes.binary_search(&k) {
            Ok(i) => Some(self.theta_star[i]),
            Err(0) => None,
            Err(i) => Some(self.theta_star[i - 1]),
        }
    }

    pub fn last(&self) -> f64 {
        *self.theta_star.last().unwrap()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().map(|&k| self.grid.t(k))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,theta_star,fisher_cum\n");
        for (i, &k) in self.nodes.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.grid.t(k), self.theta_star[i], self.fisher[i]));
        }
        out
    }
}
