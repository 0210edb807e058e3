//! Fixed-step integrators: classical RK4 on vectors and 4th-order Magnus
//! steps on matrix Lie groups, plus small dense matrix helpers.
//!
//! Fixed steps keep runs bitwise reproducible; conserved quantities are
//! monitored by the callers rather than enforced by the scheme.

use nalgebra::{DMatrix, DVector};

use crate::Result;

/// Node times `t0, t0+h, …` covering `[t0, t_end]`; a final partial step is
/// appended when `t_end` is not a whole number of steps away.
pub fn step_times(t0: f64, t_end: f64, h: f64) -> Vec<f64> {
    assert!(h > 0.0 && t_end > t0);
    let span = t_end - t0;
    let ratio = span / h;
    let mut n_full = ratio.floor() as usize;
    // Absorb float noise when t_end/h is a whole number.
    if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) {
        n_full = ratio.round() as usize;
    }
    let mut times: Vec<f64> = (0..=n_full).map(|k| t0 + k as f64 * h).collect();
    let last = *times.last().unwrap();
    if t_end - last > 1e-12 * span.max(1.0) {
        times.push(t_end);
    } else {
        *times.last_mut().unwrap() = last.min(t_end);
    }
    times
}

/// Classical RK4 over the nodes of [`step_times`]. `guard` runs on every
/// accepted node and may abort (blow-up detection and similar).
pub fn rk4<F, G>(
    f: F,
    y0: DVector<f64>,
    t0: f64,
    t_end: f64,
    h: f64,
    mut guard: G,
) -> Result<(Vec<f64>, Vec<DVector<f64>>)>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
    G: FnMut(f64, &DVector<f64>) -> Result<()>,
{
    let times = step_times(t0, t_end, h);
    let mut ys = Vec::with_capacity(times.len());
    guard(times[0], &y0)?;
    ys.push(y0);
    for w in times.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let dt = t_next - t;
        let y = ys.last().unwrap();
        let k1 = f(t, y)?;
        let k2 = f(t + 0.5 * dt, &(y + &k1 * (0.5 * dt)))?;
        let k3 = f(t + 0.5 * dt, &(y + &k2 * (0.5 * dt)))?;
        let k4 = f(t + dt, &(y + &k3 * dt))?;
        let y_next = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        guard(t_next, &y_next)?;
        ys.push(y_next);
    }
    Ok((times, ys))
}

/// Matrix exponential by scaling and squaring with a Taylor kernel. Intended
/// for the small (≤ 4×4) matrices of group representations.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let norm = m.amax() * d as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m / 2f64.powi(s);
    let mut result = DMatrix::identity(d, d);
    let mut term = DMatrix::identity(d, d);
    for k in 1..=24 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

/// Nearest orthogonal matrix (polar factor) via SVD.
pub fn polar_projection(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd");
    let vt = svd.v_t.expect("svd");
    u * vt
}

/// Two-point Gauss nodes used by the 4th-order Magnus step.
pub fn gauss2_nodes(t: f64, h: f64) -> (f64, f64) {
    let c = 3f64.sqrt() / 6.0;
    (t + (0.5 - c) * h, t + (0.5 + c) * h)
}

fn commutator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

/// One 4th-order Magnus step for `Ẏ = A(t)·Y`:
/// `Y(t+h) = exp(h/2·(A1+A2) − √3/12·h²·[A1, A2])·Y(t)`
/// with `A1, A2` at the Gauss nodes.
pub fn magnus4_step_left<F>(a: F, t: f64, h: f64, y: &DMatrix<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    let (t1, t2) = gauss2_nodes(t, h);
    let a1 = a(t1)?;
    let a2 = a(t2)?;
    let omega = (&a1 + &a2) * (h / 2.0) - commutator(&a1, &a2) * (3f64.sqrt() / 12.0 * h * h);
    Ok(expm(&omega) * y)
}

/// One 4th-order Magnus step for the right-sided equation `ġ = g·Ξ(t)`:
/// `g(t+h) = g(t)·exp(h/2·(Ξ1+Ξ2) + √3/12·h²·[Ξ1, Ξ2])`.
pub fn magnus4_step_right<F>(xi: F, t: f64, h: f64, g: &DMatrix<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    let (t1, t2) = gauss2_nodes(t, h);
    let x1 = xi(t1)?;
    let x2 = xi(t2)?;
    let omega = (&x1 + &x2) * (h / 2.0) + commutator(&x1, &x2) * (3f64.sqrt() / 12.0 * h * h);
    Ok(g * expm(&omega))
}

/// 5-point 4th-order centered first derivative of a sampled matrix curve at
/// node `k` (interior nodes only).
pub fn centered_derivative5(values: &[DMatrix<f64>], h: f64, k: usize) -> DMatrix<f64> {
    assert!(k >= 2 && k + 2 < values.len());
    (&values[k - 2] - &values[k + 2] + (&values[k + 1] - &values[k - 1]) * 8.0) / (12.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_times_partial_and_exact() {
        let t = step_times(0.0, 1.0, 1e-3);
        assert_eq!(t.len(), 1001);
        assert_eq!(*t.last().unwrap(), 1.0);
        let t = step_times(0.0, 6.2832, 1e-3);
        assert_eq!(t.len(), 6285); // 6283 full steps + partial
        assert!((t[6283] - 6.283).abs() < 1e-12);
        assert_eq!(*t.last().unwrap(), 6.2832);
    }

    #[test]
    fn rk4_is_fourth_order_on_a_nonlinear_problem() {
        // y' = y², y(0) = 1, y(t) = 1/(1−t).
        let f = |_t: f64, y: &DVector<f64>| Ok(DVector::from_vec(vec![y[0] * y[0]]));
        let exact = 1.0 / (1.0 - 0.5);
        let err_at = |h: f64| {
            let (_, ys) = rk4(f, DVector::from_vec(vec![1.0]), 0.0, 0.5, h, |_, _| Ok(()))
                .unwrap();
            (ys.last().unwrap()[0] - exact).abs()
        };
        let e1 = err_at(0.01);
        let e2 = err_at(0.005);
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn expm_agrees_with_closed_form_rotation() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -1.3, 1.3, 0.0]);
        let e = expm(&m);
        let (c, s) = (1.3f64.cos(), 1.3f64.sin());
        assert!((e[(0, 0)] - c).abs() < 1e-14);
        assert!((e[(1, 0)] - s).abs() < 1e-14);
    }

    #[test]
    fn magnus4_convergence_on_nonautonomous_group_ode() {
        // ġ = g·Ξ(t) on SO(3) with a time-dependent non-commuting generator.
        let l1 = DMatrix::from_row_slice(3, 3, &[0., 0., 0., 0., 0., -1., 0., 1., 0.]);
        let l2 = DMatrix::from_row_slice(3, 3, &[0., 0., 1., 0., 0., 0., -1., 0., 0.]);
        let xi = |t: f64| Ok(&l1 * 1.0 + &l2 * t);
        let run = |h: f64| {
            let mut g = DMatrix::identity(3, 3);
            let times = step_times(0.0, 1.0, h);
            for w in times.windows(2) {
                g = magnus4_step_right(xi, w[0], w[1] - w[0], &g).unwrap();
            }
            g
        };
        let reference = run(1e-4);
        let e1 = (run(0.02) - &reference).amax();
        let e2 = (run(0.01) - &reference).amax();
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
        // Group property: result stays orthogonal.
        let g = run(0.01);
        assert!((&g * g.transpose() - DMatrix::identity(3, 3)).amax() < 1e-10);
    }
}
