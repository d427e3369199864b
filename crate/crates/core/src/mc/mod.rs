//! Monte Carlo replication engine.
//!
//! Replication `r` simulates with seed `base_seed + r`; replications run in
//! parallel and are collected in seed order, so reports do not depend on the
//! number of worker threads.

mod stats;

pub use stats::{ad_p_value, mean_var, normality_check, rate_fit, NormalityTest, RateFit, AD_CRITICAL};

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::bound_from_limit;
use crate::kbfilter::{run_filter_cached, Riccati};
use crate::model::{limit_system, CaseTag, ModelSpec, TimeGrid};
use crate::onestep::{adaptive_filter_from, m_star, robust_evaluate, AdaptiveInit, OneStepContext};
use crate::prelim::{
    estimate_example1, estimate_example2, learning_interval, learning_node, Branch, Downstream, Inverter,
    PrelimResult,
};
use crate::simulate::{simulate_path, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;
const MAX_FAILURE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Preliminary estimate `θ̄`.
    Prelim,
    /// One-step estimate `θ*`.
    Onestep,
    /// `θ*_{t,ε}` at the checkpoints.
    Process,
    /// `m*_ε(t) − m(θ₀,t)` at the checkpoints, both in the robust form
    /// started from `y0` at `τ_ε`.
    Mstar,
    /// Adaptive filter error `m_ε(t) − Y_t` at the checkpoints.
    Adaptive,
    /// Filter error `m(θ₀,t) − Y_t` at the checkpoints.
    Filter,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Prelim,
        EstimatorKind::Onestep,
        EstimatorKind::Process,
        EstimatorKind::Mstar,
        EstimatorKind::Adaptive,
        EstimatorKind::Filter,
    ];

    fn needs_prelim(self) -> bool {
        self != EstimatorKind::Filter
    }

    fn needs_one_step(self) -> bool {
        !matches!(self, EstimatorKind::Prelim | EstimatorKind::Filter)
    }

    fn needs_process(self) -> bool {
        matches!(self, EstimatorKind::Process | EstimatorKind::Mstar | EstimatorKind::Adaptive)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrelimMethod {
    /// Bisection inversion of `x_τ(·)`.
    #[default]
    Generic,
    /// Closed form for `f = θ·f_t`.
    Example1,
    /// Closed form for `a = θ·a_t`.
    Example2,
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub model: ModelSpec,
    pub theta0: f64,
    pub delta: f64,
    pub n_rep: usize,
    pub grid: TimeGrid,
    pub base_seed: u64,
    pub checkpoints: Vec<f64>,
    pub estimators: BTreeSet<EstimatorKind>,
    pub prelim_method: PrelimMethod,
    pub adaptive_init: AdaptiveInit,
    /// Learning horizon to use instead of `ε^δ`; required when `ε = 0`.
    pub tau_override: Option<f64>,
}

impl McConfig {
    pub fn new(model: ModelSpec, theta0: f64, delta: f64, n_rep: usize, grid: TimeGrid) -> Self {
        McConfig {
            model,
            theta0,
            delta,
            n_rep,
            grid,
            base_seed: 0,
            checkpoints: Vec::new(),
            estimators: [EstimatorKind::Prelim, EstimatorKind::Onestep].into_iter().collect(),
            prelim_method: PrelimMethod::Generic,
            adaptive_init: AdaptiveInit::WarmStart,
            tau_override: None,
        }
    }

    fn usage(&self) -> Downstream {
        if self.estimators.iter().any(|e| e.needs_one_step()) {
            Downstream::OneStep
        } else {
            Downstream::Preliminary
        }
    }

    /// Learning horizon snapped to the grid.
    pub fn tau_eps(&self) -> Result<f64> {
        let tau = match self.tau_override {
            Some(t) => t,
            None if self.model.eps == 0.0 => {
                return Err(Error::input("eps = 0 needs an explicit learning horizon"));
            }
            None => learning_interval(self.model.eps, self.delta, self.model.horizon, self.model.case_tag, self.usage())?,
        };
        Ok(self.grid.t(learning_node(&self.grid, tau)?))
    }

    fn validate(&self) -> Result<f64> {
        if self.n_rep < 2 {
            return Err(Error::input(format!("n_rep = {} must be at least 2", self.n_rep)));
        }
        if !(self.theta0 > self.model.theta_lo && self.theta0 < self.model.theta_hi) {
            return Err(Error::input(format!(
                "theta0 = {} outside ({}, {})",
                self.theta0, self.model.theta_lo, self.model.theta_hi
            )));
        }
        if (self.grid.horizon - self.model.horizon).abs() > 1e-12 * self.model.horizon {
            return Err(Error::input("grid horizon differs from the model horizon"));
        }
        if self.estimators.is_empty() {
            return Err(Error::input("no estimators selected"));
        }
        let tau = self.tau_eps()?;
        let needs_checkpoints = self.estimators.iter().any(|e| e.needs_process() || *e == EstimatorKind::Filter);
        if needs_checkpoints && self.checkpoints.is_empty() {
            return Err(Error::input("selected estimators need at least one checkpoint"));
        }
        for &t in &self.checkpoints {
            if !(t > tau && t <= self.grid.horizon) {
                return Err(Error::input(format!("checkpoint {t} outside ({tau}, {}]", self.grid.horizon)));
            }
            if self.grid.nearest(t) <= learning_node(&self.grid, tau)? {
                return Err(Error::input(format!("checkpoint {t} snaps onto the learning interval")));
            }
        }
        Ok(tau)
    }
}

/// One replication. Fields for estimators that were not requested are empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub seed: u64,
    pub theta_bar: Option<f64>,
    pub branch: Option<Branch>,
    pub theta_star: Option<f64>,
    pub process: Vec<f64>,
    pub mstar_err: Vec<f64>,
    pub adaptive_err: Vec<f64>,
    pub filter_err: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
    pub bias: f64,
    pub mse: f64,
    /// `ε⁻²` times the variance; absent when `ε = 0`.
    pub scaled_variance: Option<f64>,
    pub scaled_mse: Option<f64>,
}

impl Summary {
    fn of(values: &[f64], target: f64, eps: f64) -> Summary {
        let (mean, variance, stderr) = mean_var(values);
        let mse = values.iter().map(|v| (v - target).powi(2)).sum::<f64>() / values.len() as f64;
        let scale = (eps > 0.0).then(|| 1.0 / (eps * eps));
        Summary {
            n: values.len(),
            mean,
            variance,
            stderr,
            bias: mean - target,
            mse,
            scaled_variance: scale.map(|s| s * variance),
            scaled_mse: scale.map(|s| s * mse),
        }
    }
}

/// Second moment of an error sample with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Risk {
    pub t: f64,
    pub mse: f64,
    pub stderr: f64,
    /// Benchmark the risk is compared against.
    pub target: f64,
}

impl Risk {
    fn of(t: f64, errors: &[f64], scale: f64, target: f64) -> Risk {
        let sq: Vec<f64> = errors.iter().map(|e| scale * e * e).collect();
        let (mse, _, stderr) = mean_var(&sq);
        Risk { t, mse, stderr, target }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub t: f64,
    pub summary: Summary,
    /// `I_0^t(θ₀)⁻¹`.
    pub target_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub n_ok: usize,
    pub n_failed: usize,
    pub tau_eps: f64,
    pub fisher: f64,
    /// `I(θ₀)⁻¹`, the efficient variance of `ε⁻¹(θ* − θ₀)`.
    pub target_variance: f64,
    pub clamp_fraction: Option<f64>,
    pub prelim: Option<Summary>,
    pub onestep: Option<Summary>,
    /// Anderson–Darling test of `ε⁻¹(θ* − θ₀)` against `N(0, I(θ₀)⁻¹)`.
    pub normality: Option<NormalityTest>,
    pub process: Vec<CheckpointSummary>,
    /// `ε⁻² E|m* − m(θ₀,t)|²` against `ẏ(θ₀,t)²/I^t(θ₀)`.
    pub mstar: Vec<Risk>,
    /// `E(m_ε(t) − Y_t)²` against `ε²γ*(θ₀,t)`.
    pub adaptive: Vec<Risk>,
    /// `E(m(θ₀,t) − Y_t)²` against `ε²γ*(θ₀,t)`.
    pub filter: Vec<Risk>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub eps: f64,
    pub delta: f64,
    pub theta0: f64,
    pub n_rep: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub base_seed: u64,
    pub checkpoints: Vec<f64>,
    pub estimators: Vec<EstimatorKind>,
    pub prelim_method: PrelimMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub schema: u32,
    pub run: RunInfo,
    #[serde(skip)]
    pub rows: Vec<McRow>,
    pub aggregates: Aggregates,
}

struct Shared<'a> {
    cfg: &'a McConfig,
    tau: f64,
    nodes: Vec<usize>,
    oracle: Option<Riccati>,
    inverter: Option<Inverter<'a>>,
}

impl Shared<'_> {
    fn has(&self, kind: EstimatorKind) -> bool {
        self.cfg.estimators.contains(&kind)
    }

    fn prelim(&self, traj: &Trajectory) -> Result<PrelimResult> {
        let model = &self.cfg.model;
        match self.cfg.prelim_method {
            PrelimMethod::Generic => self.inverter.as_ref().expect("inverter built").invert(traj.x[learning_node(&traj.grid, self.tau)?]),
            PrelimMethod::Example1 => estimate_example1(model, traj, self.tau),
            PrelimMethod::Example2 => estimate_example2(model, traj, self.tau),
        }
    }

    fn replicate(&self, seed: u64) -> Result<McRow> {
        let cfg = self.cfg;
        let model = &cfg.model;
        let traj = simulate_path(model, cfg.theta0, &cfg.grid, seed)?;
        let mut row = McRow {
            seed,
            theta_bar: None,
            branch: None,
            theta_star: None,
            process: Vec::new(),
            mstar_err: Vec::new(),
            adaptive_err: Vec::new(),
            filter_err: Vec::new(),
            error: None,
        };
        if self.has(EstimatorKind::Filter) {
            let f = run_filter_cached(model, self.oracle.as_ref().expect("oracle Riccati"), &traj, false)?;
            row.filter_err = self.nodes.iter().map(|&k| f.m[k] - traj.y[k]).collect();
        }
        if !cfg.estimators.iter().any(|e| e.needs_prelim()) {
            return Ok(row);
        }
        let pre = self.prelim(&traj)?;
        row.theta_bar = Some(pre.theta_bar);
        row.branch = Some(pre.branch);
        if !cfg.estimators.iter().any(|e| e.needs_one_step()) {
            return Ok(row);
        }
        let ctx = OneStepContext::prepare(model, &traj, &pre)?;
        if self.has(EstimatorKind::Onestep) {
            row.theta_star = Some(ctx.estimate(model, &traj)?.theta_star);
        }
        if !cfg.estimators.iter().any(|e| e.needs_process()) {
            return Ok(row);
        }
        let process = ctx.process(model, &traj)?;
        if self.has(EstimatorKind::Process) {
            row.process = self
                .nodes
                .iter()
                .map(|&k| process.at_node(k).ok_or_else(|| Error::input("process undefined at checkpoint")))
                .collect::<Result<_>>()?;
        }
        if self.has(EstimatorKind::Mstar) {
            let ric0 = self.oracle.as_ref().expect("oracle Riccati");
            row.mstar_err = self
                .nodes
                .iter()
                .map(|&k| {
                    let reference = robust_evaluate(model, ric0, &traj, process.k_tau(), k)?.m_star;
                    m_star(model, &traj, &process, cfg.grid.t(k)).map(|r| r.m_star - reference)
                })
                .collect::<Result<_>>()?;
        }
        if self.has(EstimatorKind::Adaptive) {
            let out = adaptive_filter_from(model, &traj, &process, &ctx.riccati, cfg.adaptive_init)?;
            row.adaptive_err = self.nodes.iter().map(|&k| out.m_star[k] - traj.y[k]).collect();
        }
        Ok(row)
    }
}

pub fn run_replications(cfg: &McConfig) -> Result<McReport> {
    let tau = cfg.validate()?;
    let model = &cfg.model;
    let nodes: Vec<usize> = cfg.checkpoints.iter().map(|&t| cfg.grid.nearest(t)).collect();
    let needs_oracle = cfg.estimators.contains(&EstimatorKind::Filter) || cfg.estimators.contains(&EstimatorKind::Mstar);
    let limit0 = limit_system(model, cfg.theta0, &cfg.grid)?;
    let oracle = needs_oracle.then(|| Riccati::from_limit(&limit0)).transpose()?;
    let needs_prelim = cfg.estimators.iter().any(|e| e.needs_prelim());
    let inverter = (needs_prelim && cfg.prelim_method == PrelimMethod::Generic)
        .then(|| Inverter::new(model, &cfg.grid, tau))
        .transpose()?;
    let shared = Shared { cfg, tau, nodes, oracle, inverter };

    let rows: Vec<McRow> = (0..cfg.n_rep as u64)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.base_seed.wrapping_add(r);
            shared.replicate(seed).unwrap_or_else(|e| McRow {
                seed,
                theta_bar: None,
                branch: None,
                theta_star: None,
                process: Vec::new(),
                mstar_err: Vec::new(),
                adaptive_err: Vec::new(),
                filter_err: Vec::new(),
                error: Some(e.to_string()),
            })
        })
        .collect();

    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed as f64 > MAX_FAILURE_FRACTION * cfg.n_rep as f64 {
        return Err(Error::TooManyFailures { failed, total: cfg.n_rep });
    }
    let aggregates = aggregate(cfg, &shared, &limit0, &rows)?;
    Ok(McReport {
        schema: SCHEMA_VERSION,
        run: RunInfo {
            eps: model.eps,
            delta: cfg.delta,
            theta0: cfg.theta0,
            n_rep: cfg.n_rep,
            n_steps: cfg.grid.n_steps,
            horizon: cfg.grid.horizon,
            base_seed: cfg.base_seed,
            checkpoints: shared.nodes.iter().map(|&k| cfg.grid.t(k)).collect(),
            estimators: cfg.estimators.iter().copied().collect(),
            prelim_method: cfg.prelim_method,
        },
        rows,
        aggregates,
    })
}

fn aggregate(cfg: &McConfig, shared: &Shared, limit0: &crate::model::DeterministicLimit, rows: &[McRow]) -> Result<Aggregates> {
    let eps = cfg.model.eps;
    let ok: Vec<&McRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let fisher = limit0.fisher_total();
    let theta0 = cfg.theta0;
    let column = |get: &dyn Fn(&McRow) -> Option<f64>| ok.iter().filter_map(|r| get(r)).collect::<Vec<f64>>();

    let theta_bar = column(&|r| r.theta_bar);
    let theta_star = column(&|r| r.theta_star);
    let prelim = (!theta_bar.is_empty()).then(|| Summary::of(&theta_bar, theta0, eps));
    let clamp_fraction = (!theta_bar.is_empty()).then(|| {
        ok.iter().filter(|r| matches!(r.branch, Some(b) if b != Branch::Interior)).count() as f64 / theta_bar.len() as f64
    });
    let onestep = (!theta_star.is_empty()).then(|| Summary::of(&theta_star, theta0, eps));
    let normality = if theta_star.len() >= 100 && eps > 0.0 {
        let scaled: Vec<f64> = theta_star.iter().map(|v| (v - theta0) / eps).collect();
        normality_check(&scaled, 1.0 / fisher).ok()
    } else {
        None
    };

    let times: Vec<f64> = shared.nodes.iter().map(|&k| cfg.grid.t(k)).collect();
    let per_checkpoint = |get: &dyn Fn(&McRow) -> &Vec<f64>, i: usize| -> Vec<f64> {
        ok.iter().filter(|r| !get(r).is_empty()).map(|r| get(r)[i]).collect()
    };
    let mut process = Vec::new();
    let mut mstar = Vec::new();
    let mut adaptive = Vec::new();
    let mut filter = Vec::new();
    for (i, (&t, &k)) in times.iter().zip(&shared.nodes).enumerate() {
        let gamma_risk = eps * eps * limit0.gamma_star[k];
        if cfg.estimators.contains(&EstimatorKind::Process) {
            let vals = per_checkpoint(&|r| &r.process, i);
            process.push(CheckpointSummary {
                t,
                summary: Summary::of(&vals, theta0, eps),
                target_variance: 1.0 / limit0.fisher_cum[k],
            });
        }
        if cfg.estimators.contains(&EstimatorKind::Mstar) && eps > 0.0 {
            let bound = bound_from_limit(&cfg.model, limit0, t)?.bound;
            mstar.push(Risk::of(t, &per_checkpoint(&|r| &r.mstar_err, i), 1.0 / (eps * eps), bound));
        }
        if cfg.estimators.contains(&EstimatorKind::Adaptive) {
            adaptive.push(Risk::of(t, &per_checkpoint(&|r| &r.adaptive_err, i), 1.0, gamma_risk));
        }
        if cfg.estimators.contains(&EstimatorKind::Filter) {
            filter.push(Risk::of(t, &per_checkpoint(&|r| &r.filter_err, i), 1.0, gamma_risk));
        }
    }
    Ok(Aggregates {
        n_ok: ok.len(),
        n_failed: rows.len() - ok.len(),
        tau_eps: shared.tau,
        fisher,
        target_variance: 1.0 / fisher,
        clamp_fraction,
        prelim,
        onestep,
        normality,
        process,
        mstar,
        adaptive,
        filter,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl McReport {
    pub fn rows_csv(&self) -> String {
        let mut header = vec!["seed".to_string(), "theta_bar".into(), "branch".into(), "theta_star".into()];
        for t in &self.run.checkpoints {
            header.push(format!("theta_star_t@{t}"));
            header.push(format!("mstar_err@{t}"));
            header.push(format!("adaptive_err@{t}"));
            header.push(format!("filter_err@{t}"));
        }
        header.push("error".into());
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![
                r.seed.to_string(),
                cell(r.theta_bar),
                r.branch.map(|b| format!("{b:?}")).unwrap_or_default(),
                cell(r.theta_star),
            ];
            for i in 0..self.run.checkpoints.len() {
                for col in [&r.process, &r.mstar_err, &r.adaptive_err, &r.filter_err] {
                    cells.push(cell(col.get(i).copied()));
                }
            }
            cells.push(r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn aggregates_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }
}

/// One point of an ε or δ sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub eps: f64,
    pub delta: f64,
    pub tau_eps: f64,
    pub report: McReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub schema: u32,
    pub points: Vec<SweepPoint>,
    /// Preliminary MSE against `ε²/τ_ε`.
    pub rate_vs_eps2_over_tau: Option<RateFit>,
    /// Preliminary MSE against `ε^{2−3δ}`.
    pub rate_vs_eps_2_minus_3delta: Option<RateFit>,
    /// δ with the smallest preliminary MSE.
    pub argmin_delta: Option<f64>,
}

/// Runs `base` at each `(ε, δ)` and fits the preliminary-estimator rates.
pub fn run_sweep(base: &McConfig, points: &[(f64, f64)]) -> Result<SweepReport> {
    let mut out = Vec::with_capacity(points.len());
    for &(eps, delta) in points {
        let cfg = McConfig { model: base.model.with_eps(eps), delta, ..base.clone() };
        let report = run_replications(&cfg)?;
        out.push(SweepPoint { eps, delta, tau_eps: report.aggregates.tau_eps, report });
    }
    let mse: Vec<Option<f64>> = out.iter().map(|p| p.report.aggregates.prelim.map(|s| s.mse)).collect();
    let all_mse: Option<Vec<f64>> = mse.iter().copied().collect();
    let fit = |scale: &dyn Fn(&SweepPoint) -> f64| {
        all_mse.as_ref().and_then(|m| rate_fit(&out.iter().map(scale).collect::<Vec<_>>(), m).ok())
    };
    let rate_a = fit(&|p| p.eps * p.eps / p.tau_eps);
    let rate_b = fit(&|p| p.eps.powf(2.0 - 3.0 * p.delta));
    let argmin_delta = all_mse.as_ref().and_then(|m| {
        m.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| out[i].delta)
    });
    Ok(SweepReport {
        schema: SCHEMA_VERSION,
        points: out,
        rate_vs_eps2_over_tau: rate_a,
        rate_vs_eps_2_minus_3delta: rate_b,
        argmin_delta,
    })
}

impl SweepReport {
    /// Rate fit matching the model's regime.
    pub fn rate_for(&self, case: CaseTag) -> Option<RateFit> {
        match case {
            CaseTag::ThetaInF => self.rate_vs_eps2_over_tau,
            CaseTag::ThetaInA => self.rate_vs_eps_2_minus_3delta,
        }
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.points.iter().enumerate() {
            let csv = p.report.rows_csv();
            let mut lines = csv.lines();
            let header = lines.next().unwrap_or_default();
            if i == 0 {
                out.push_str(&format!("eps,delta,{header}\n"));
            }
            for l in lines {
                out.push_str(&format!("{},{},{l}\n", p.eps, p.delta));
            }
        }
        out
    }

    pub fn aggregates_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }
}
