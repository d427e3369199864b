//! Kalman–Bucy filter in rescaled form.
//!
//! With `γ* = γ/ε²` the Riccati equation
//! `γ*' = 2aγ* − γ*²f²/σ² + b²`, `γ*(0) = 0` no longer involves ε, and the
//! filter mean follows `dm = (a − Df) m dt + D dX` with gain `D = γ* f/σ²`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CoeffPoint, DeterministicLimit, ModelSpec, TimeGrid};
use crate::ode::rk4_step;
use crate::simulate::Trajectory;

const NEGATIVE_TOLERANCE: f64 = -1e-12;

/// Right-hand side of the rescaled Riccati equation and its θ-derivative.
#[inline]
pub(crate) fn riccati_rhs(c: &CoeffPoint, g: f64, gd: f64) -> (f64, f64) {
    let s2 = c.sigma * c.sigma;
    let f2 = c.f * c.f;
    let dg = 2.0 * c.a * g - g * g * f2 / s2 + c.b * c.b;
    let dgd = 2.0 * c.a_dot * g + 2.0 * c.a * gd - (2.0 * g * gd * f2 + 2.0 * g * g * c.f * c.f_dot) / s2;
    (dg, dgd)
}

/// Rescaled Riccati solution at a fixed θ. Independent of any trajectory and
/// of ε, so one handle serves every path filtered at that θ.
#[derive(Debug, Clone)]
pub struct Riccati {
    pub grid: TimeGrid,
    pub theta: f64,
    pub gamma_star: Vec<f64>,
    pub gamma_star_dot: Vec<f64>,
    pub d: Vec<f64>,
    pub d_dot: Vec<f64>,
    pub(crate) coeffs: Vec<CoeffPoint>,
}

pub fn solve_riccati(model: &ModelSpec, theta: f64, grid: &TimeGrid) -> Result<Riccati> {
    let n = grid.n_steps;
    let h = grid.h();
    let rhs = |c: &CoeffPoint, s: &[f64; 2]| {
        let (a, b) = riccati_rhs(c, s[0], s[1]);
        [a, b]
    };
    let mut gamma = Vec::with_capacity(n + 1);
    let mut gamma_dot = Vec::with_capacity(n + 1);
    let mut coeffs = Vec::with_capacity(n + 1);
    let mut state = [0.0, 0.0];
    let mut left = model.coeffs(theta, 0.0);
    for k in 0..=n {
        gamma.push(state[0]);
        gamma_dot.push(state[1]);
        coeffs.push(left);
        if k == n {
            break;
        }
        let mid = model.coeffs(theta, grid.t(k) + 0.5 * h);
        let right = model.coeffs(theta, grid.t(k + 1));
        state = rk4_step(h, &state, &left, &mid, &right, rhs);
        left = right;
    }
    Riccati::assemble(*grid, theta, gamma, gamma_dot, coeffs)
}

impl Riccati {
    /// Reuses the Riccati part of a limit-system sweep. The arithmetic is the
    /// same as [`solve_riccati`], so the arrays agree bitwise.
    pub fn from_limit(limit: &DeterministicLimit) -> Result<Riccati> {
        Riccati::assemble(
            limit.grid,
            limit.theta,
            limit.gamma_star.clone(),
            limit.gamma_star_dot.clone(),
            limit.node_coeffs.clone(),
        )
    }

    fn assemble(
        grid: TimeGrid,
        theta: f64,
        gamma_star: Vec<f64>,
        gamma_star_dot: Vec<f64>,
        coeffs: Vec<CoeffPoint>,
    ) -> Result<Riccati> {
        for (k, (&g, &gd)) in gamma_star.iter().zip(&gamma_star_dot).enumerate() {
            if !(g.is_finite() && gd.is_finite()) || g < NEGATIVE_TOLERANCE {
                return Err(Error::Integration { what: "Riccati equation", node: k, t: grid.t(k) });
            }
        }
        let d = gamma_star.iter().zip(&coeffs).map(|(g, c)| g * c.f / (c.sigma * c.sigma)).collect();
        let d_dot = gamma_star
            .iter()
            .zip(&gamma_star_dot)
            .zip(&coeffs)
            .map(|((g, gd), c)| (gd * c.f + g * c.f_dot) / (c.sigma * c.sigma))
            .collect();
        Ok(Riccati { grid, theta, gamma_star, gamma_star_dot, d, d_dot, coeffs })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterOutput {
    pub grid: TimeGrid,
    pub m: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub d: Vec<f64>,
    pub mdot: Option<Vec<f64>>,
}

pub fn run_filter(model: &ModelSpec, theta: f64, traj: &Trajectory, with_derivative: bool) -> Result<FilterOutput> {
    let ric = solve_riccati(model, theta, &traj.grid)?;
    run_filter_cached(model, &ric, traj, with_derivative)
}

/// Euler recursion for `m` (and `ṁ`) driven by the observed increments, using
/// a precomputed Riccati solution on the trajectory's grid.
pub fn run_filter_cached(model: &ModelSpec, ric: &Riccati, traj: &Trajectory, with_derivative: bool) -> Result<FilterOutput> {
    if ric.grid != traj.grid {
        return Err(Error::input(format!(
            "filter grid ({} steps on [0, {}]) does not match trajectory grid ({} steps on [0, {}])",
            ric.grid.n_steps, ric.grid.horizon, traj.grid.n_steps, traj.grid.horizon
        )));
    }
    let n = traj.grid.n_steps;
    let h = traj.grid.h();
    let mut m = Vec::with_capacity(n + 1);
    let mut mdot = Vec::with_capacity(if with_derivative { n + 1 } else { 0 });
    let (mut mv, mut md) = (model.y0, 0.0);
    m.push(mv);
    if with_derivative {
        mdot.push(md);
    }
    for (k, dx) in traj.increments().enumerate() {
        let c = &ric.coeffs[k];
        let d = ric.d[k];
        let drift = c.a - d * c.f;
        if with_derivative {
            let dd = ric.d_dot[k];
            md += drift * md * h + dd * dx + (c.a_dot - dd * c.f - d * c.f_dot) * mv * h;
        }
        mv += drift * mv * h + d * dx;
        if !(mv.is_finite() && md.is_finite()) {
            return Err(Error::Integration { what: "filter", node: k + 1, t: traj.grid.t(k + 1) });
        }
        m.push(mv);
        if with_derivative {
            mdot.push(md);
        }
    }
    Ok(FilterOutput {
        grid: traj.grid,
        m,
        gamma_star: ric.gamma_star.clone(),
        d: ric.d.clone(),
        mdot: with_derivative.then_some(mdot),
    })
}

impl FilterOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.m.len() * 64);
        out.push_str(if self.mdot.is_some() { "t,m,gamma_star,D,mdot\n" } else { "t,m,gamma_star,D\n" });
        for k in 0..self.m.len() {
            out.push_str(&format!("{},{},{},{}", self.grid.t(k), self.m[k], self.gamma_star[k], self.d[k]));
            if let Some(md) = &self.mdot {
                out.push_str(&format!(",{}", md[k]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{limit_system, CaseTag};
    use crate::simulate::simulate_path;
    use rayon::prelude::*;
    use serde_json::json;

    #[test]
    fn toy_riccati_is_tanh() {
        let m = toy();
        let grid = TimeGrid::new(1.0, 10_000).unwrap();
        for theta in [0.6, 1.0, 1.4] {
            let r = solve_riccati(&m, theta, &grid).unwrap();
            let err = (0..=grid.n_steps)
                .map(|k| (r.gamma_star[k] - (theta * grid.t(k)).tanh() / theta).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-8, "theta {theta}: {err}");
        }
        let r = solve_riccati(&m, 1.0, &grid).unwrap();
        assert!((r.gamma_star[grid.n_steps] - 0.761_594_155_955_764_9).abs() < 1e-10);
        // γ̇* = ∂θ tanh(θt)/θ = t sech²(θt)/θ − tanh(θt)/θ²
        let t = 1.0f64;
        let exact = t / t.cosh().powi(2) - t.tanh();
        assert!((r.gamma_star_dot[grid.n_steps] - exact).abs() < 1e-9);
    }

    #[test]
    fn degenerate_riccati_cases() {
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let no_state_noise = ModelSpec::new(file(json!("theta"), json!(0.0), 1.0, 0.0, CaseTag::ThetaInF)).unwrap();
        let r = solve_riccati(&no_state_noise, 1.0, &grid).unwrap();
        assert!(r.gamma_star.iter().all(|&g| g == 0.0));

        // f ≡ 0, a ≡ 0: γ*(t) = ∫₀ᵗ b² = 4t for b = 2.
        let blind = ModelSpec::new_relaxed(file(json!(0.0), json!(0.0), 1.0, 2.0, CaseTag::ThetaInF)).unwrap();
        let r = solve_riccati(&blind, 1.0, &grid).unwrap();
        for k in 0..=grid.n_steps {
            assert!((r.gamma_star[k] - 4.0 * grid.t(k)).abs() < 1e-12);
            assert_eq!(r.d[k], 0.0);
        }
    }

    #[test]
    fn gain_identity_and_limit_reuse() {
        let m = state_drift();
        let grid = TimeGrid::new(1.0, 500).unwrap();
        let r = solve_riccati(&m, 1.2, &grid).unwrap();
        for k in 0..=grid.n_steps {
            let t = grid.t(k);
            let s2 = m.sigma.value(1.2, t).powi(2);
            let gf = r.gamma_star[k] * m.f.value(1.2, t);
            assert_eq!(r.d[k], gf / s2);
            assert!((r.d[k] * s2 - gf).abs() <= 4.0 * f64::EPSILON * gf.abs());
        }
        let lim = limit_system(&m, 1.2, &grid).unwrap();
        let r2 = Riccati::from_limit(&lim).unwrap();
        assert_eq!(r.gamma_star, r2.gamma_star);
        assert_eq!(r.d_dot, r2.d_dot);
    }

    #[test]
    fn gamma_star_is_path_and_eps_free() {
        let m = toy();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let p1 = simulate_path(&m, 1.0, &grid, 1).unwrap();
        let p2 = simulate_path(&m.with_eps(0.3), 1.0, &grid, 2).unwrap();
        let f1 = run_filter(&m, 1.0, &p1, false).unwrap();
        let f2 = run_filter(&m.with_eps(0.3), 1.0, &p2, false).unwrap();
        assert_eq!(f1.gamma_star, f2.gamma_star);
        assert_eq!(f1.m[0], m.y0);
        assert_eq!(f1.gamma_star[0], 0.0);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let m = toy();
        let p = simulate_path(&m, 1.0, &TimeGrid::new(1.0, 100).unwrap(), 1).unwrap();
        let r = solve_riccati(&m, 1.0, &TimeGrid::new(1.0, 200).unwrap()).unwrap();
        assert!(matches!(run_filter_cached(&m, &r, &p, false), Err(Error::Input(_))));
    }

    #[test]
    fn noise_free_filter_recovers_limit() {
        for m in [toy(), state_drift()] {
            let m = m.with_eps(0.0);
            let grid = TimeGrid::new(1.0, 20_000).unwrap();
            let p = simulate_path(&m, 1.1, &grid, 0).unwrap();
            let out = run_filter(&m, 1.1, &p, true).unwrap();
            let lim = limit_system(&m, 1.1, &grid).unwrap();
            let tol = 5.0 * grid.h();
            let md = out.mdot.as_ref().unwrap();
            for (k, (m, md)) in out.m.iter().zip(md).enumerate() {
                assert!((m - lim.y[k]).abs() <= tol, "m at {k}");
                assert!((md - lim.ydot[k]).abs() <= tol, "mdot at {k}: {md} vs {}", lim.ydot[k]);
            }
        }
    }

    #[test]
    fn derivative_filter_matches_finite_difference() {
        let m = state_drift();
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let p = simulate_path(&m, 1.0, &grid, 5).unwrap();
        let th = 0.9;
        let dlt = 1e-4;
        let out = run_filter(&m, th, &p, true).unwrap();
        let up = run_filter(&m, th + dlt, &p, false).unwrap();
        let dn = run_filter(&m, th - dlt, &p, false).unwrap();
        let md = out.mdot.unwrap();
        for k in (0..=grid.n_steps).step_by(100) {
            let fd = (up.m[k] - dn.m[k]) / (2.0 * dlt);
            assert!((md[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "node {k}: {} vs {fd}", md[k]);
        }
    }

    fn filter_risk(m: &ModelSpec, grid: &TimeGrid, node: usize, n: u64) -> (f64, f64) {
        let errs: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|s| {
                let p = simulate_path(m, 1.0, grid, s).unwrap();
                let f = run_filter(m, 1.0, &p, false).unwrap();
                (f.m[node] - p.y[node]).powi(2)
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / n as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn filter_risk_matches_riccati() {
        let m = toy();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let r = solve_riccati(&m, 1.0, &grid).unwrap();
        let (mean, se) = filter_risk(&m, &grid, 500, 4000);
        let target = m.eps * m.eps * r.gamma_star[500];
        assert!((mean - target).abs() <= 3.0 * se, "{mean} vs {target} (se {se})");
    }

    #[test]
    fn filter_error_scales_with_eps_squared() {
        let m = toy();
        let grid = TimeGrid::new(1.0, 500).unwrap();
        let (small, _) = filter_risk(&m, &grid, 500, 500);
        let (large, _) = filter_risk(&m.with_eps(0.02), &grid, 500, 500);
        let ratio = large / small;
        assert!((ratio / 4.0 - 1.0).abs() <= 0.1, "ratio {ratio}");
    }

    #[test]
    fn innovations_are_white() {
        let m = state_drift().with_eps(0.05);
        let grid = TimeGrid::new(1.0, 20_000).unwrap();
        let p = simulate_path(&m, 1.0, &grid, 9).unwrap();
        let out = run_filter(&m, 1.0, &p, false).unwrap();
        let h = grid.h();
        let nu: Vec<f64> = p
            .increments()
            .enumerate()
            .map(|(k, dx)| {
                let t = grid.t(k);
                (dx - m.f.value(1.0, t) * out.m[k] * h) / (m.eps * m.sigma.value(1.0, t) * h.sqrt())
            })
            .collect();
        let n = nu.len() as f64;
        let mean = nu.iter().sum::<f64>() / n;
        let var = nu.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let lag1 = nu.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / ((n - 1.0) * var);
        assert!(mean.abs() <= 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 3.0 * (2.0 / n).sqrt(), "var {var}");
        assert!(lag1.abs() <= 3.0 / n.sqrt(), "lag1 {lag1}");
    }

    #[test]
    fn csv_header_follows_derivative_flag() {
        let m = toy();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let p = simulate_path(&m, 1.0, &grid, 1).unwrap();
        let plain = run_filter(&m, 1.0, &p, false).unwrap().to_csv();
        let full = run_filter(&m, 1.0, &p, true).unwrap().to_csv();
        assert!(plain.starts_with("t,m,gamma_star,D\n"));
        assert!(full.starts_with("t,m,gamma_star,D,mdot\n"));
        assert_eq!(plain.lines().count(), 6);
    }
}
