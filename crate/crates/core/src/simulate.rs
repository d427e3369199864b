//! Euler–Maruyama sample paths of the observed/hidden pair.
//!
//! Each seed owns two ChaCha substreams: stream 0 drives the state noise `V`,
//! stream 1 the observation noise `W`. Paths are a pure function of
//! `(model, θ₀, grid, seed)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{limit_xy, ModelSpec, TimeGrid};

pub const STATE_STREAM: u64 = 0;
pub const OBSERVATION_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    /// Observed path, `x[0] = 0`.
    pub x: Vec<f64>,
    /// Hidden path, `y[0] = y0`.
    pub y: Vec<f64>,
    pub seed: u64,
    pub theta_true: f64,
    pub eps: f64,
}

/// Sidecar metadata written next to a trajectory CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub theta_true: f64,
    pub eps: f64,
    pub h: f64,
}

pub fn noise_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn simulate_path(model: &ModelSpec, theta0: f64, grid: &TimeGrid, seed: u64) -> Result<Trajectory> {
    simulate_prefix(model, theta0, grid, seed, grid.n_steps)
}

/// Simulates nodes `0..=last` of the path on `grid`. The values coincide
/// exactly with the first `last + 1` nodes of [`simulate_path`]; the returned
/// trajectory carries the truncated grid `[0, t_last]`.
pub fn simulate_prefix(
    model: &ModelSpec,
    theta0: f64,
    grid: &TimeGrid,
    seed: u64,
    last: usize,
) -> Result<Trajectory> {
    if !(theta0 > model.theta_lo && theta0 < model.theta_hi) {
        return Err(Error::input(format!(
            "true parameter {theta0} outside ({}, {})",
            model.theta_lo, model.theta_hi
        )));
    }
    if last == 0 || last > grid.n_steps {
        return Err(Error::input(format!("prefix length {last} outside 1..={}", grid.n_steps)));
    }
    let h = grid.h();
    let sqrt_h = h.sqrt();
    let eps = model.eps;
    let mut state_noise = noise_stream(seed, STATE_STREAM);
    let mut obs_noise = noise_stream(seed, OBSERVATION_STREAM);

    let mut x = Vec::with_capacity(last + 1);
    let mut y = Vec::with_capacity(last + 1);
    let (mut xv, mut yv) = (0.0, model.y0);
    x.push(xv);
    y.push(yv);
    for k in 0..last {
        let t = grid.t(k);
        let xi: f64 = StandardNormal.sample(&mut state_noise);
        let eta: f64 = StandardNormal.sample(&mut obs_noise);
        let f = model.f.value(theta0, t);
        let a = model.a.value(theta0, t);
        let b = model.b.value(theta0, t);
        let s = model.sigma.value(theta0, t);
        let ny = yv + a * yv * h + eps * b * sqrt_h * xi;
        xv += f * yv * h + eps * s * sqrt_h * eta;
        yv = ny;
        if !(xv.is_finite() && yv.is_finite()) {
            return Err(Error::Overflow { what: "simulation", node: k + 1, t: grid.t(k + 1) });
        }
        x.push(xv);
        y.push(yv);
    }
    let grid = if last == grid.n_steps {
        *grid
    } else {
        TimeGrid { n_steps: last, horizon: grid.t(last) }
    };
    Ok(Trajectory { grid, x, y, seed, theta_true: theta0, eps })
}

impl Trajectory {
    pub fn meta(&self) -> TrajectoryMeta {
        TrajectoryMeta { seed: self.seed, theta_true: self.theta_true, eps: self.eps, h: self.grid.h() }
    }

    /// Observation increments `X_{k+1} − X_k`.
    pub fn increments(&self) -> impl Iterator<Item = f64> + '_ {
        self.x.windows(2).map(|w| w[1] - w[0])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.x.len() * 48);
        out.push_str("t,X,Y\n");
        for (k, (x, y)) in self.x.iter().zip(&self.y).enumerate() {
            out.push_str(&format!("{},{},{}\n", self.grid.t(k), x, y));
        }
        out
    }

    /// Reads a `t,X,Y` table. The grid is rebuilt from the first and last
    /// rows and must be uniform.
    pub fn from_csv(text: &str, meta: &TrajectoryMeta) -> Result<Trajectory> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::input("empty trajectory file"))?;
        if header.trim() != "t,X,Y" {
            return Err(Error::input(format!("unexpected trajectory header {header:?}")));
        }
        let (mut ts, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::input(format!("row {}: expected 3 columns", i + 2)));
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::input(format!("row {}: {e}", i + 2)))
            };
            ts.push(parse(cols[0])?);
            x.push(parse(cols[1])?);
            y.push(parse(cols[2])?);
        }
        if ts.len() < 2 {
            return Err(Error::input("trajectory needs at least two rows"));
        }
        let grid = TimeGrid::new(*ts.last().unwrap(), ts.len() - 1)?;
        if ts[0] != 0.0 || ts.iter().enumerate().any(|(k, &t)| (t - grid.t(k)).abs() > 1e-9 * grid.horizon) {
            return Err(Error::input("trajectory time column is not a uniform grid starting at 0"));
        }
        Ok(Trajectory { grid, x, y, seed: meta.seed, theta_true: meta.theta_true, eps: meta.eps })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentRow {
    pub tau: f64,
    /// Empirical `E|X_τ − x_τ(θ₀)|² / ε²`.
    pub second_moment: f64,
    pub stderr: f64,
}

/// Empirical second moment of the rescaled observation error at each `τ`,
/// over seeds `base_seed..base_seed + n_rep`. Each `τ` is snapped to the
/// nearest grid node.
pub fn moment_scaling_probe(
    model: &ModelSpec,
    theta0: f64,
    grid: &TimeGrid,
    taus: &[f64],
    n_rep: usize,
    base_seed: u64,
) -> Result<Vec<MomentRow>> {
    if n_rep < 2 {
        return Err(Error::input("moment probe needs at least two replications"));
    }
    if !(model.eps > 0.0) {
        return Err(Error::input("moment probe needs eps > 0"));
    }
    let nodes = taus
        .iter()
        .map(|&tau| {
            if !(tau > 0.0 && tau <= grid.horizon) {
                return Err(Error::input(format!("tau = {tau} outside (0, {}]", grid.horizon)));
            }
            Ok(grid.nearest(tau).max(1))
        })
        .collect::<Result<Vec<usize>>>()?;
    let limits = nodes
        .iter()
        .map(|&k| limit_xy(model, theta0, grid.t(k), k).map(|(x, _)| x))
        .collect::<Result<Vec<f64>>>()?;
    let last = *nodes.iter().max().unwrap();
    let samples = (0..n_rep as u64)
        .into_par_iter()
        .map(|r| {
            let path = simulate_prefix(model, theta0, grid, base_seed.wrapping_add(r), last)?;
            Ok(nodes
                .iter()
                .zip(&limits)
                .map(|(&k, &xl)| ((path.x[k] - xl) / model.eps).powi(2))
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let n = n_rep as f64;
    Ok(nodes
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            MomentRow { tau: grid.t(k), second_moment: mean, stderr: (var / n).sqrt() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::limit_system;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn path_invariants_and_reproducibility() {
        let m = toy();
        let grid = TimeGrid::new(1.0, 500).unwrap();
        let a = simulate_path(&m, 1.0, &grid, 7).unwrap();
        let b = simulate_path(&m, 1.0, &grid, 7).unwrap();
        let c = simulate_path(&m, 1.0, &grid, 8).unwrap();
        assert_eq!(a.x[0], 0.0);
        assert_eq!(a.y[0], m.y0);
        assert_eq!(a.x.len(), grid.len());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_ne!(a.x, c.x);
        assert!(simulate_path(&m, 1.5, &grid, 7).is_err());
        assert!(simulate_path(&m, 0.2, &grid, 7).is_err());
    }

    #[test]
    fn noise_free_path_tracks_limit() {
        let m = toy().with_eps(0.0);
        let grid = TimeGrid::new(1.0, 100_000).unwrap();
        let p = simulate_path(&m, 1.2, &grid, 1).unwrap();
        let lim = limit_system(&m, 1.2, &grid).unwrap();
        let max_y = p.y.iter().zip(&lim.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_y <= 1e-4);
        let max_x = p.x.iter().zip(&lim.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_x <= 1e-4);
    }

    #[test]
    fn mean_of_hidden_state_matches_limit() {
        // a = θ so the state mean is not trivially constant.
        let m = state_drift().with_eps(0.1);
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let n = 10_000;
        let ends: Vec<f64> = (0..n).into_par_iter().map(|s| simulate_path(&m, 1.0, &grid, s).unwrap().y[1000]).collect();
        let mean = ends.iter().sum::<f64>() / n as f64;
        let sd = (ends.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        // compare with the Euler mean (1 + θh)^n, which is what the scheme is unbiased for
        let euler_mean = (1.0 + 1e-3f64).powi(1000);
        assert!((mean - euler_mean).abs() <= 3.0 * sd / (n as f64).sqrt(), "{mean} vs {euler_mean}");
        assert!((euler_mean - 1f64.exp()).abs() < 2e-3);
    }

    #[test]
    fn observation_variance_matches_covariance_quadrature() {
        // Var η_T = ∫σ² + ∫ b(q)² (∫_q^T f(s) A(s,q) ds)² dq; toy model ⇒ T + θ² T³/3.
        let m = toy();
        let theta = 1.0;
        let big_t = 1.0;
        let nq = 2000;
        let hq = big_t / nq as f64;
        let inner = |q: f64| theta * (big_t - q); // f = θ, A ≡ 1
        let quad: f64 = (0..=nq)
            .map(|i| {
                let q = i as f64 * hq;
                let w = if i == 0 || i == nq { 0.5 } else { 1.0 };
                w * hq * (1.0 + inner(q).powi(2))
            })
            .sum();
        assert!((quad - (1.0 + 1.0 / 3.0)).abs() < 1e-6);

        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let n = 10_000;
        let etas: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|s| {
                let p = simulate_path(&m, theta, &grid, 100 + s).unwrap();
                (p.x[1000] - theta) / m.eps
            })
            .collect();
        let mean = etas.iter().sum::<f64>() / n as f64;
        let var = etas.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // variance of a sample variance for Gaussian data: 2σ⁴/(n−1)
        let se = quad * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - quad).abs() <= 3.0 * se, "{var} vs {quad}");
    }

    #[test]
    fn moment_probe_scales_linearly_in_tau() {
        let m = toy();
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let taus = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5];
        let rows = moment_scaling_probe(&m, 1.0, &grid, &taus, 4000, 11).unwrap();
        let lx: Vec<f64> = rows.iter().map(|r| r.tau.ln()).collect();
        let ly: Vec<f64> = rows.iter().map(|r| r.second_moment.ln()).collect();
        let fit = crate::mc::rate_fit(&rows.iter().map(|r| r.tau).collect::<Vec<_>>(), &rows.iter().map(|r| r.second_moment).collect::<Vec<_>>()).unwrap();
        assert!(lx.len() == ly.len());
        assert!((0.8..=1.2).contains(&fit.slope), "slope {}", fit.slope);
        // τ = 0.1 against Var η_τ = τ + θ²τ³/3
        let r = rows.iter().find(|r| (r.tau - 0.1).abs() < 1e-12).unwrap();
        let exact = 0.1 + 0.001 / 3.0;
        assert!((r.second_moment - exact).abs() <= 3.0 * r.stderr, "{} vs {exact}", r.second_moment);
        assert!(moment_scaling_probe(&m, 1.0, &grid, &taus, 1, 0).is_err());
    }

    #[test]
    fn pure_observation_noise_moment() {
        // b ≡ 0, σ ≡ 2: η_τ = 2 W_τ exactly, so E η_τ² = 4τ.
        let file = file(serde_json::json!("theta"), serde_json::json!(0.0), 2.0, 0.0, crate::model::CaseTag::ThetaInF);
        let m = ModelSpec::new(file).unwrap();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let rows = moment_scaling_probe(&m, 1.0, &grid, &[0.01, 0.1], 20_000, 3).unwrap();
        for r in rows {
            assert!((r.second_moment - 4.0 * r.tau).abs() <= 3.0 * r.stderr, "{r:?}");
        }
    }

    #[test]
    fn noise_streams_are_uncorrelated() {
        let n = 100_000;
        let mut a = noise_stream(42, STATE_STREAM);
        let mut b = noise_stream(42, OBSERVATION_STREAM);
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut a)).collect();
        let ys: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut b)).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let rho = cov / (vx * vy).sqrt();
        assert!(rho.abs() <= 3.0 / (n as f64).sqrt(), "rho {rho}");
        // distinct streams really are distinct sequences
        assert_ne!(noise_stream(1, 0).random::<u64>(), noise_stream(1, 1).random::<u64>());
    }

    #[test]
    fn weak_error_is_first_order() {
        // For a linear SDE the Euler mean equals the noise-free Euler recursion,
        // so the weak error of E[X_T] is read off an ε = 0 path.
        let m = state_drift().with_eps(0.0);
        let exact = 1f64.exp() - 1.0;
        let err = |n: usize| {
            let g = TimeGrid::new(1.0, n).unwrap();
            (simulate_path(&m, 1.0, &g, 0).unwrap().x[n] - exact).abs()
        };
        let ratio = err(200) / err(400);
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn csv_round_trip() {
        let m = toy();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let p = simulate_path(&m, 1.0, &grid, 3).unwrap();
        let back = Trajectory::from_csv(&p.to_csv(), &p.meta()).unwrap();
        assert_eq!(back.x, p.x);
        assert_eq!(back.y, p.y);
        assert_eq!(back.grid.n_steps, 50);
        assert!(Trajectory::from_csv("t,X\n0,0\n", &p.meta()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prefix_matches_full_path(seed in any::<u64>(), last in 1usize..200) {
            let m = toy();
            let grid = TimeGrid::new(1.0, 200).unwrap();
            let full = simulate_path(&m, 1.1, &grid, seed).unwrap();
            let pre = simulate_prefix(&m, 1.1, &grid, seed, last).unwrap();
            prop_assert_eq!(&pre.x[..], &full.x[..=last]);
            prop_assert_eq!(&pre.y[..], &full.y[..=last]);
            prop_assert_eq!(pre.grid.n_steps, last);
        }
    }
}
