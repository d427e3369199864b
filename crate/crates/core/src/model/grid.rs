use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform discretization of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::input("grid needs at least one step"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::input(format!("grid horizon {horizon} must be positive")));
        }
        Ok(TimeGrid { n_steps, horizon })
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `k`; exact at both ends.
    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.n_steps as f64
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.t(k))
    }

    /// Index of the node closest to `t`, clamped into the grid.
    pub fn nearest(&self, t: f64) -> usize {
        let k = (t / self.h()).round();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }

    /// Linear interpolation of node values at `t ∈ [0, T]`.
    pub fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let mut s = (t / self.h()).clamp(0.0, self.n_steps as f64);
        if (s - s.round()).abs() < 1e-9 {
            s = s.round();
        }
        if s == self.n_steps as f64 {
            return values[self.n_steps];
        }
        let k = s.floor() as usize;
        let w = s - k as f64;
        if w == 0.0 {
            values[k]
        } else {
            values[k] + w * (values[k + 1] - values[k])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_exact_at_ends_and_increasing() {
        let g = TimeGrid::new(0.7, 333).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(333), 0.7);
        let nodes: Vec<f64> = g.nodes().collect();
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(nodes.len(), g.len());
    }

    #[test]
    fn rejects_empty_grid() {
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
    }

    #[test]
    fn interpolation_and_nearest() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let v = [0.0, 1.0, 4.0, 9.0, 16.0];
        assert_eq!(g.interpolate(&v, 0.25), 1.0);
        assert_eq!(g.interpolate(&v, 0.375), 2.5);
        assert_eq!(g.interpolate(&v, 1.0), 16.0);
        assert_eq!(g.nearest(0.3), 1);
        assert_eq!(g.nearest(0.4), 2);
        assert_eq!(g.nearest(5.0), 4);
    }
}
