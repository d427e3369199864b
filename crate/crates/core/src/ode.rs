//! Classical fourth-order one-step integration over fixed-size states.

/// One RK4 step. The caller supplies the coefficient context at the left end,
/// midpoint and right end of the step so expensive coefficient evaluation is
/// done once per abscissa rather than once per stage.
#[inline]
pub(crate) fn rk4_step<const N: usize, C>(
    h: f64,
    state: &[f64; N],
    left: &C,
    mid: &C,
    right: &C,
    rhs: impl Fn(&C, &[f64; N]) -> [f64; N],
) -> [f64; N] {
    let k1 = rhs(left, state);
    let k2 = rhs(mid, &axpy(state, 0.5 * h, &k1));
    let k3 = rhs(mid, &axpy(state, 0.5 * h, &k2));
    let k4 = rhs(right, &axpy(state, h, &k3));
    let mut out = *state;
    for i in 0..N {
        out[i] = state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

#[inline]
fn axpy<const N: usize>(x: &[f64; N], a: f64, y: &[f64; N]) -> [f64; N] {
    let mut out = *x;
    for i in 0..N {
        out[i] = x[i] + a * y[i];
    }
    out
}

/// Composite trapezoid running integral; `out[0] = 0`.
pub(crate) fn cumulative_trapezoid(values: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        out.push(acc);
    }
    out
}
