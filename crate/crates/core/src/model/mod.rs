//! Statistical model of the partially observed system
//!
//! ```text
//! dX = f(θ,t) Y dt + ε σ(t) dW,   X(0) = 0
//! dY = a(θ,t) Y dt + ε b(t) dV,   Y(0) = y0
//! ```
//!
//! together with its noise-free limit and the Fisher information built on it.

mod expr;
mod grid;
mod limit;

pub use expr::{CoeffExpr, Coefficient, Var};
pub use grid::TimeGrid;
pub use limit::{fisher_window, limit_system, limit_xy, DeterministicLimit};

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Which coefficient carries the parameter. Selects the regularity regime the
/// model is checked against and the form of the score used by the one-step
/// estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseTag {
    /// θ enters the observation drift `f`; `f(θ,0)` and `∂θ f(θ,0)` bounded away from zero.
    ThetaInF,
    /// θ enters only the state drift `a`; `a(θ,0) > 0` and `∂θ a(θ,0) > 0`.
    ThetaInA,
}

/// Size of the θ mesh used to check the regularity conditions.
pub const CONDITION_MESH: usize = 200;
const T_MESH: usize = 200;
const SIGMA_FLOOR: f64 = 1e-8;
const SEPARATION_FLOOR: f64 = 1e-10;

/// On-disk layout of a model; keys mirror [`ModelSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub f: CoeffExpr,
    pub a: CoeffExpr,
    pub sigma: CoeffExpr,
    pub b: CoeffExpr,
    pub alpha: f64,
    pub beta: f64,
    pub y0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub eps: f64,
    #[serde(rename = "case")]
    pub case_tag: CaseTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct ModelSpec {
    pub f: Coefficient,
    pub a: Coefficient,
    pub sigma: Coefficient,
    pub b: Coefficient,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub y0: f64,
    pub horizon: f64,
    pub eps: f64,
    pub case_tag: CaseTag,
}

/// All coefficient values needed by the filter and limit equations at one (θ, t).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CoeffPoint {
    pub f: f64,
    pub f_dot: f64,
    pub a: f64,
    pub a_dot: f64,
    pub sigma: f64,
    pub b: f64,
}

impl TryFrom<ModelFile> for ModelSpec {
    type Error = Error;

    fn try_from(m: ModelFile) -> Result<Self> {
        ModelSpec::new(m)
    }
}

impl From<ModelSpec> for ModelFile {
    fn from(m: ModelSpec) -> ModelFile {
        ModelFile {
            f: m.f.expr,
            a: m.a.expr,
            sigma: m.sigma.expr,
            b: m.b.expr,
            alpha: m.theta_lo,
            beta: m.theta_hi,
            y0: m.y0,
            horizon: m.horizon,
            eps: m.eps,
            case_tag: m.case_tag,
        }
    }
}

impl ModelSpec {
    /// Builds a model and checks every invariant, including the regularity
    /// condition selected by `case_tag`.
    pub fn new(file: ModelFile) -> Result<Self> {
        let m = Self::new_relaxed(file)?;
        m.check_regularity()?;
        Ok(m)
    }

    /// Like [`ModelSpec::new`] but skips the regularity check. Degenerate
    /// models (`f ≡ 0`, `b ≡ 0`, ...) are useful for exercising the filter.
    pub fn new_relaxed(file: ModelFile) -> Result<Self> {
        let ModelFile { f, a, sigma, b, alpha, beta, y0, horizon, eps, case_tag } = file;
        if !(alpha.is_finite() && beta.is_finite() && alpha < beta) {
            return Err(Error::input(format!("parameter interval ({alpha}, {beta}) must be finite with alpha < beta")));
        }
        if !(y0.is_finite() && y0 != 0.0) {
            return Err(Error::Assumption(format!("initial state y0 = {y0} must be finite and nonzero")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::input(format!("horizon T = {horizon} must be positive")));
        }
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::input(format!("noise level eps = {eps} must be nonnegative")));
        }
        for (name, e) in [("sigma", &sigma), ("b", &b)] {
            if e.depends_on(Var::Theta) {
                return Err(Error::input(format!("{name} must not depend on theta")));
            }
        }
        let m = ModelSpec {
            f: Coefficient::new(f),
            a: Coefficient::new(a),
            sigma: Coefficient::new(sigma),
            b: Coefficient::new(b),
            theta_lo: alpha,
            theta_hi: beta,
            y0,
            horizon,
            eps,
            case_tag,
        };
        m.check_finite()?;
        m.check_sigma()?;
        Ok(m)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization is infallible")
    }

    /// Same model with a different noise level.
    pub fn with_eps(&self, eps: f64) -> Self {
        ModelSpec { eps, ..self.clone() }
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.theta_lo && theta <= self.theta_hi
    }

    pub fn theta_mesh(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        let (lo, hi) = (self.theta_lo, self.theta_hi);
        (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
    }

    fn t_mesh(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=T_MESH).map(move |k| self.horizon * k as f64 / T_MESH as f64)
    }

    fn check_finite(&self) -> Result<()> {
        for theta in self.theta_mesh(CONDITION_MESH) {
            for t in self.t_mesh() {
                let c = self.coeffs(theta, t);
                let extra = [self.f.dt(theta, t), self.sigma.dt(theta, t)];
                let all = [c.f, c.f_dot, c.a, c.a_dot, c.sigma, c.b, extra[0], extra[1]];
                if all.iter().any(|v| !v.is_finite()) {
                    return Err(Error::input(format!(
                        "coefficients are not finite at theta = {theta}, t = {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_sigma(&self) -> Result<()> {
        for t in self.t_mesh() {
            let s = self.sigma.value(0.0, t);
            if s.abs() < SIGMA_FLOOR {
                return Err(Error::Assumption(format!("sigma({t}) = {s} is not bounded away from zero")));
            }
        }
        Ok(())
    }

    /// Mesh check of the separation conditions at t = 0.
    pub fn check_regularity(&self) -> Result<()> {
        let (mut inf_v, mut inf_d) = (f64::INFINITY, f64::INFINITY);
        for theta in self.theta_mesh(CONDITION_MESH) {
            let (v, d) = match self.case_tag {
                CaseTag::ThetaInF => (self.f.value(theta, 0.0).abs(), self.f.dtheta(theta, 0.0).abs()),
                CaseTag::ThetaInA => (self.a.value(theta, 0.0), self.a.dtheta(theta, 0.0)),
            };
            inf_v = inf_v.min(v);
            inf_d = inf_d.min(d);
        }
        let (name, dname) = match self.case_tag {
            CaseTag::ThetaInF => ("|f(theta,0)|", "|df/dtheta(theta,0)|"),
            CaseTag::ThetaInA => ("a(theta,0)", "da/dtheta(theta,0)"),
        };
        if inf_v <= SEPARATION_FLOOR {
            return Err(Error::Assumption(format!("inf over theta of {name} is {inf_v}, must be positive")));
        }
        if inf_d <= SEPARATION_FLOOR {
            return Err(Error::Assumption(format!("inf over theta of {dname} is {inf_d}, must be positive")));
        }
        Ok(())
    }

    /// Checked evaluation of one of the coefficient expressions.
    pub fn eval_coeff(&self, expr: &CoeffExpr, theta: f64, t: f64) -> Result<f64> {
        if !self.contains(theta) {
            return Err(Error::input(format!(
                "theta = {theta} outside [{}, {}]",
                self.theta_lo, self.theta_hi
            )));
        }
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::input(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(expr.eval(theta, t))
    }

    #[inline]
    pub(crate) fn coeffs(&self, theta: f64, t: f64) -> CoeffPoint {
        CoeffPoint {
            f: self.f.value(theta, t),
            f_dot: self.f.dtheta(theta, t),
            a: self.a.value(theta, t),
            a_dot: self.a.dtheta(theta, t),
            sigma: self.sigma.value(theta, t),
            b: self.b.value(theta, t),
        }
    }

    /// `1e-12 · T / mean σ²`, the smallest Fisher information the estimators divide by.
    pub fn fisher_floor(&self) -> f64 {
        let n = T_MESH + 1;
        let mean_s2 = self.t_mesh().map(|t| self.sigma.value(0.0, t).powi(2)).sum::<f64>() / n as f64;
        1e-12 * self.horizon / mean_s2
    }
}
