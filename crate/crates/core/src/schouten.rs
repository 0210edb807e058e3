//! The Schouten partial connection on the distribution determined by a
//! rigging, its autoparallel (straightest) curves, parallel transport and
//! curvature.
//!
//! With an orthonormal horizontal frame the Koszul formula collapses to
//! structure functions: writing `[X_j, X_k]_D = c^i_{jk} X_i` for the
//! horizontal part of the bracket in the adapted frame,
//!
//! `Γ^i_{jk} = ½ (c^i_{jk} − c^k_{ji} − c^j_{ki})`.
//!
//! Non-orthonormal metric coefficients are handled by a one-time Cholesky
//! re-framing; inputs and outputs stay in the caller's frame. The sign
//! conventions are pinned by the torsion identity
//! `Γ^i_{jk} − Γ^i_{kj} = c^i_{jk}` and by metric skewness
//! `Γ^i_{jk} + Γ^k_{ji} = 0`, both covered by tests; a reader deriving the
//! opposite bracket sign flips `Γ`, which leaves the geodesics unchanged.

use nalgebra::{DMatrix, DVector};

use crate::geometry::{
    levi_civita_christoffels, metric_extension, structure_functions, SRStructure,
};
use crate::hamiltonian::normal_geodesic;
use crate::trajectory::Trajectory;
use crate::{Error, NumericParams, Result};

/// Christoffel symbols of the partial connection at a point, in an
/// orthonormal horizontal frame. `Γ^i_{jk}` is the `X_i`-component of
/// `∇_{X_j} X_k`.
#[derive(Debug, Clone)]
pub struct SchoutenTable {
    pub m: usize,
    data: Vec<f64>,
}

impl SchoutenTable {
    pub fn gamma(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.m + j) * self.m + k]
    }

    /// `−Γ^i_{jk} u^j w^k` (transport right-hand side).
    fn transport_rhs(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let m = self.m;
        let mut out = DVector::zeros(m);
        for i in 0..m {
            let mut sum = 0.0;
            for j in 0..m {
                for k in 0..m {
                    sum += self.gamma(i, j, k) * u[j] * w[k];
                }
            }
            out[i] = -sum;
        }
        out
    }
}

/// Precomputed solver: the structure re-framed to an orthonormal horizontal
/// frame, plus the coefficient maps between the caller's frame and the
/// orthonormal one.
pub struct SchoutenSolver {
    ortho: SRStructure,
    /// `ũ = Lᵀ u` maps caller coefficients to orthonormal ones.
    l_t: DMatrix<f64>,
    /// `u = L^{-T} ũ` maps back.
    l_inv_t: DMatrix<f64>,
}

impl SchoutenSolver {
    pub fn new(s: &SRStructure) -> Self {
        let (ortho, l) = s.orthonormalized();
        let l_t = l.transpose();
        let l_inv_t = l_t.clone().try_inverse().expect("Cholesky factor");
        SchoutenSolver {
            ortho,
            l_t,
            l_inv_t,
        }
    }

    pub fn orthonormal_structure(&self) -> &SRStructure {
        &self.ortho
    }

    pub fn to_ortho(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.l_t * u
    }

    pub fn from_ortho(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.l_inv_t * u
    }

    /// Christoffel symbols of the partial connection at `q`.
    pub fn christoffels(&self, q: &DVector<f64>) -> Result<SchoutenTable> {
        let m = self.ortho.rank();
        let c = structure_functions(&self.ortho, q)?;
        let mut data = vec![0.0; m * m * m];
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    data[(i * m + j) * m + k] =
                        0.5 * (c.c(i, j, k) - c.c(k, j, i) - c.c(j, k, i));
                }
            }
        }
        Ok(SchoutenTable { m, data })
    }

    /// Straightest geodesic: `q̇ = Σ u^i X_i(q)`, `u̇^i = −Γ^i_{jk} u^j u^k`.
    /// `v0` and the recorded controls are in the caller's frame.
    pub fn geodesic(
        &self,
        q0: &DVector<f64>,
        v0: &DVector<f64>,
        t_end: f64,
        h: f64,
        params: &NumericParams,
    ) -> Result<Trajectory> {
        let n = self.ortho.dim();
        let m = self.ortho.rank();
        let u0 = self.to_ortho(v0);
        let mut y0 = DVector::zeros(n + m);
        y0.rows_mut(0, n).copy_from(q0);
        y0.rows_mut(n, m).copy_from(&u0);
        let f = |_t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
            let q = y.rows(0, n).into_owned();
            let u = y.rows(n, m).into_owned();
            let gamma = self.christoffels(&q)?;
            let q_dot = self.ortho.horizontal_vector(&q, &u)?;
            let u_dot = gamma.transport_rhs(&u, &u);
            let mut dy = DVector::zeros(n + m);
            dy.rows_mut(0, n).copy_from(&q_dot);
            dy.rows_mut(n, m).copy_from(&u_dot);
            Ok(dy)
        };
        let guard = |t: f64, y: &DVector<f64>| -> Result<()> {
            let norm = y.rows(0, n).norm();
            if norm > params.blowup {
                return Err(Error::BlowUp { t, norm });
            }
            Ok(())
        };
        let (times, ys) = crate::ode::rk4(f, y0, 0.0, t_end, h, guard)?;
        let positions: Vec<DVector<f64>> = ys.iter().map(|y| y.rows(0, n).into_owned()).collect();
        let ortho_controls: Vec<DVector<f64>> =
            ys.iter().map(|y| y.rows(n, m).into_owned()).collect();
        let mut velocities = Vec::with_capacity(times.len());
        let mut speed0 = 0.0;
        let mut speed_drift: f64 = 0.0;
        for (k, (q, u)) in positions.iter().zip(&ortho_controls).enumerate() {
            velocities.push(self.ortho.horizontal_vector(q, u)?);
            let speed = u.norm_squared();
            if k == 0 {
                speed0 = speed;
            } else {
                speed_drift = speed_drift.max((speed - speed0).abs());
            }
        }
        let controls: Vec<DVector<f64>> =
            ortho_controls.iter().map(|u| self.from_ortho(u)).collect();
        let mut tr = Trajectory::new(times, positions);
        tr.velocities = Some(velocities);
        tr.controls = Some(controls);
        tr.diagnostics
            .set("speed_drift", speed_drift / speed0.abs().max(1e-300));
        Ok(tr)
    }

    /// Parallel transport of the horizontal vector with caller-frame
    /// coefficients `w0` along a horizontal trajectory that carries controls.
    /// Returns caller-frame coefficients at every node of the input grid
    /// together with the relative drift of `g_D(w,w)`.
    pub fn parallel_transport(
        &self,
        tr: &Trajectory,
        w0: &DVector<f64>,
    ) -> Result<(Vec<DVector<f64>>, f64)> {
        if tr.controls.is_none() {
            return Err(Error::MissingControls);
        }
        let sample = |t: f64| -> Result<(DVector<f64>, DVector<f64>)> {
            let q = tr.sample_position(t)?;
            let u = self.to_ortho(&tr.sample_controls(t)?);
            Ok((q, u))
        };
        let f = |t: f64, w: &DVector<f64>| -> Result<DVector<f64>> {
            let (q, u) = sample(t)?;
            let gamma = self.christoffels(&q)?;
            Ok(gamma.transport_rhs(&u, w))
        };
        // Integrate on the trajectory's own grid.
        let mut ws = Vec::with_capacity(tr.len());
        let mut w = self.to_ortho(w0);
        ws.push(w.clone());
        for pair in tr.times.windows(2) {
            let (t, dt) = (pair[0], pair[1] - pair[0]);
            let k1 = f(t, &w)?;
            let k2 = f(t + 0.5 * dt, &(&w + &k1 * (0.5 * dt)))?;
            let k3 = f(t + 0.5 * dt, &(&w + &k2 * (0.5 * dt)))?;
            let k4 = f(t + dt, &(&w + &k3 * dt))?;
            w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            ws.push(w.clone());
        }
        let norm0 = ws[0].norm_squared();
        let drift = ws
            .iter()
            .map(|w| (w.norm_squared() - norm0).abs())
            .fold(0.0, f64::max)
            / norm0.max(1e-300);
        let out = ws.iter().map(|w| self.from_ortho(w)).collect();
        Ok((out, drift))
    }

    /// Curvature `R(X_i, X_j) X_k` in the orthonormal frame:
    /// `∇_i ∇_j − ∇_j ∇_i − ∇_{[X_i,X_j]_D} − [[X_i,X_j]_V, ·]_D`
    /// with the derivative of `Γ` by central finite differences.
    pub fn curvature(
        &self,
        q: &DVector<f64>,
        i: usize,
        j: usize,
        k: usize,
        params: &NumericParams,
    ) -> Result<DVector<f64>> {
        let m = self.ortho.rank();
        let n = self.ortho.dim();
        let gamma = self.christoffels(q)?;
        let c = structure_functions(&self.ortho, q)?;
        let h = params.fd_step_at(q);
        // Coordinate derivatives of the Γ table.
        let mut dgamma = Vec::with_capacity(n);
        for c_idx in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[c_idx] += h;
            qm[c_idx] -= h;
            let gp = self.christoffels(&qp)?;
            let gm = self.christoffels(&qm)?;
            let d: Vec<f64> = gp
                .data
                .iter()
                .zip(&gm.data)
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect();
            dgamma.push(d);
        }
        let xi = self.ortho.frame()[i].eval(q)?;
        let xj = self.ortho.frame()[j].eval(q)?;
        let dir_deriv = |dir: &DVector<f64>, l: usize, a: usize, b: usize| -> f64 {
            (0..n)
                .map(|c_idx| dir[c_idx] * dgamma[c_idx][(l * m + a) * m + b])
                .sum()
        };
        let mut r = DVector::zeros(m);
        for l in 0..m {
            let mut val = dir_deriv(&xi, l, j, k) - dir_deriv(&xj, l, i, k);
            for a in 0..m {
                val += gamma.gamma(l, i, a) * gamma.gamma(a, j, k)
                    - gamma.gamma(l, j, a) * gamma.gamma(a, i, k);
                // −∇ along the horizontal part of [X_i, X_j].
                val -= c.c(a, i, j) * gamma.gamma(l, a, k);
            }
            // −[[X_i,X_j]_V, X_k]_D: vertical bracket components against the
            // horizontal components of [Y_α, X_k].
            for alpha in m..n {
                val -= c.c(alpha, i, j) * c.c(l, alpha, k);
            }
            r[l] = val;
        }
        Ok(r)
    }
}

/// Christoffel symbols of the Schouten connection at a point (orthonormal
/// horizontal frame; non-identity metrics are re-framed internally).
pub fn schouten_christoffels(s: &SRStructure, q: &DVector<f64>) -> Result<SchoutenTable> {
    SchoutenSolver::new(s).christoffels(q)
}

/// Straightest geodesic from `q0` with initial frame coefficients `v0`.
pub fn s_geodesic(
    s: &SRStructure,
    q0: &DVector<f64>,
    v0: &DVector<f64>,
    t_end: f64,
    h: f64,
    params: &NumericParams,
) -> Result<Trajectory> {
    SchoutenSolver::new(s).geodesic(q0, v0, t_end, h, params)
}

/// Parallel transport along a horizontal trajectory carrying controls.
pub fn parallel_transport(
    s: &SRStructure,
    tr: &Trajectory,
    w0: &DVector<f64>,
) -> Result<(Vec<DVector<f64>>, f64)> {
    SchoutenSolver::new(s).parallel_transport(tr, w0)
}

/// Curvature `R(X_i, X_j) X_k` at `q` in the orthonormal frame.
pub fn schouten_curvature(
    s: &SRStructure,
    q: &DVector<f64>,
    i: usize,
    j: usize,
    k: usize,
    params: &NumericParams,
) -> Result<DVector<f64>> {
    SchoutenSolver::new(s).curvature(q, i, j, k, params)
}

/// Run the straightest geodesic and the normal geodesic with zero rigging
/// pairings from the same initial data; returns the maximal position gap and
/// the per-node gap curve. The two solvers run on independent worker threads
/// (everything involved is immutable).
pub fn compare_straightest_shortest(
    s: &SRStructure,
    q0: &DVector<f64>,
    v0: &DVector<f64>,
    t_end: f64,
    h: f64,
    params: &NumericParams,
) -> Result<(f64, Vec<f64>)> {
    let (straightest, shortest) = std::thread::scope(|scope| {
        let a = scope.spawn(|| s_geodesic(s, q0, v0, t_end, h, params));
        let b = scope.spawn(|| {
            normal_geodesic(s, q0, v0, &DVector::zeros(s.corank()), t_end, h, params)
        });
        (a.join().expect("solver thread"), b.join().expect("solver thread"))
    });
    let straightest = straightest?;
    let shortest = shortest?;
    let gaps: Vec<f64> = straightest
        .positions
        .iter()
        .zip(&shortest.positions)
        .map(|(a, b)| (a - b).norm())
        .collect();
    let max = gaps.iter().copied().fold(0.0, f64::max);
    Ok((max, gaps))
}

/// Residual of the projected Levi-Civita equation `pr_D(∇^g_{γ̇} γ̇) = 0`
/// along a straightest geodesic, where `g` is the chart extension metric that
/// declares the rigging orthogonal. The trajectory must satisfy the
/// straightest-geodesic equation (its controls are used for `u̇`).
pub fn straightest_lc_projection_residual(
    s: &SRStructure,
    tr: &Trajectory,
    params: &NumericParams,
) -> Result<f64> {
    let solver = SchoutenSolver::new(s);
    let ortho = solver.orthonormal_structure();
    let g = metric_extension(s);
    let controls = tr.controls.as_ref().ok_or(Error::MissingControls)?;
    let n = s.dim();
    let m = s.rank();
    let mut worst: f64 = 0.0;
    for (idx, (q, u_orig)) in tr.positions.iter().zip(controls).enumerate() {
        if idx % 37 != 0 {
            continue; // sample the curve, the check is O(n³) per point
        }
        let u = solver.to_ortho(u_orig);
        let gamma_s = solver.christoffels(q)?;
        let u_dot = gamma_s.transport_rhs(&u, &u);
        // γ̈ = Σ u̇^i X_i + Σ u^i J_{X_i} γ̇.
        let q_dot = ortho.horizontal_vector(q, &u)?;
        let mut q_ddot = DVector::zeros(n);
        for i in 0..m {
            let (xi, ji) = ortho.frame()[i].eval_with_jacobian(q)?;
            q_ddot += xi * u_dot[i] + ji * &q_dot * u[i];
        }
        let gamma_g = levi_civita_christoffels(&g, q, params)?;
        let cov = &q_ddot - gamma_g.acceleration(&q_dot);
        let coeffs = s.adapted_coefficients(q, &cov)?;
        worst = worst.max(coeffs.rows(0, m).amax());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bracket;
    use approx::assert_abs_diff_eq;

    fn heisenberg() -> SRStructure {
        SRStructure::parse(
            3,
            &[&["1", "0", "-q2/2"], &["0", "1", "q1/2"]],
            &[&["0", "0", "1"]],
        )
        .unwrap()
    }

    /// Heisenberg frame with a quadratic perturbation and a rigging that is
    /// not the bundle vertical; the straightest/shortest classes separate.
    /// The separation is driven by the horizontal part of [X_j, Y]: it pushes
    /// the rigging pairing of the extremal off zero, so the rigging needs a
    /// position-dependent horizontal component for a robust gap.
    fn skew_heisenberg() -> SRStructure {
        SRStructure::parse(
            3,
            &[&["1", "0", "-q2/2"], &["0", "1", "q1/2 + 0.1*q1^2"]],
            &[&["0.1*q1", "0", "1"]],
        )
        .unwrap()
    }

    fn params() -> NumericParams {
        NumericParams::default()
    }

    #[test]
    fn abelian_frame_has_zero_christoffels() {
        let s = SRStructure::parse(3, &[&["1", "0", "0"], &["0", "1", "0"]], &[&["0", "0", "1"]])
            .unwrap();
        let t = schouten_christoffels(&s, &DVector::from_vec(vec![0.3, 0.1, -0.5])).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(t.gamma(i, j, k), 0.0);
                }
            }
        }
    }

    #[test]
    fn heisenberg_christoffels_vanish() {
        // The only nonzero structure function is vertical, so Γ = 0.
        let s = heisenberg();
        let t = schouten_christoffels(&s, &DVector::from_vec(vec![0.7, -0.2, 0.9])).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_abs_diff_eq!(t.gamma(i, j, k), 0.0, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn torsion_and_metric_identities() {
        // Γ^i_{jk} − Γ^i_{kj} = c^i_{jk} and Γ^i_{jk} + Γ^k_{ji} = 0 at random
        // points of a structure with nonvanishing horizontal brackets.
        let s = skew_heisenberg();
        for seed in 0..50 {
            let q = DVector::from_vec(vec![
                (seed as f64 * 0.61).sin(),
                (seed as f64 * 0.37).cos() * 0.8,
                seed as f64 * 0.02,
            ]);
            let t = schouten_christoffels(&s, &q).unwrap();
            let c = structure_functions(&s, &q).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        assert_abs_diff_eq!(
                            t.gamma(i, j, k) - t.gamma(i, k, j),
                            c.c(i, j, k),
                            epsilon = 1e-10
                        );
                        assert_abs_diff_eq!(
                            t.gamma(i, j, k) + t.gamma(k, j, i),
                            0.0,
                            epsilon = 1e-10
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn flat_frame_geodesics_are_straight() {
        let s = SRStructure::parse(3, &[&["1", "0", "0"], &["0", "1", "0"]], &[&["0", "0", "1"]])
            .unwrap();
        let tr = s_geodesic(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![0.6, 0.8]),
            1.0,
            1e-3,
            &params(),
        )
        .unwrap();
        let last = tr.positions.last().unwrap();
        assert_abs_diff_eq!(last[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(last[1], 0.8, epsilon = 1e-12);
        assert_eq!(last[2], 0.0);
    }

    #[test]
    fn heisenberg_straightest_is_straight_line_lift() {
        let s = heisenberg();
        let tr = s_geodesic(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.0]),
            1.0,
            1e-3,
            &params(),
        )
        .unwrap();
        for (t, q) in tr.times.iter().zip(&tr.positions).step_by(200) {
            assert!((q[0] - t).abs() < 1e-10);
            assert!(q[1].abs() < 1e-12);
            assert!(q[2].abs() < 1e-12);
        }
        assert!(tr.diagnostics.get("speed_drift").unwrap() < 1e-10);
    }

    #[test]
    fn transport_of_tangent_along_geodesic_is_the_control() {
        let s = skew_heisenberg();
        let v0 = DVector::from_vec(vec![0.8, 0.6]);
        let tr = s_geodesic(&s, &DVector::zeros(3), &v0, 1.0, 1e-3, &params()).unwrap();
        let (ws, drift) = parallel_transport(&s, &tr, &v0).unwrap();
        let controls = tr.controls.as_ref().unwrap();
        let mut worst: f64 = 0.0;
        for (w, u) in ws.iter().zip(controls) {
            worst = worst.max((w - u).amax());
        }
        assert!(worst < 1e-8, "worst {worst}");
        assert!(drift < 1e-10, "drift {drift}");
    }

    #[test]
    fn transport_in_flat_frame_is_constant() {
        let s = SRStructure::parse(3, &[&["1", "0", "0"], &["0", "1", "0"]], &[&["0", "0", "1"]])
            .unwrap();
        let tr = s_geodesic(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.5]),
            1.0,
            1e-2,
            &params(),
        )
        .unwrap();
        let w0 = DVector::from_vec(vec![-0.3, 0.9]);
        let (ws, drift) = parallel_transport(&s, &tr, &w0).unwrap();
        assert!((ws.last().unwrap() - &w0).amax() < 1e-12);
        assert!(drift < 1e-14);
    }

    #[test]
    fn transport_requires_controls() {
        let s = heisenberg();
        let mut tr = s_geodesic(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.0]),
            0.5,
            1e-2,
            &params(),
        )
        .unwrap();
        tr.controls = None;
        assert!(matches!(
            parallel_transport(&s, &tr, &DVector::from_vec(vec![1.0, 0.0])),
            Err(Error::MissingControls)
        ));
    }

    #[test]
    fn curvature_flat_frame_vanishes() {
        let s = SRStructure::parse(3, &[&["1", "0", "0"], &["0", "1", "0"]], &[&["0", "0", "1"]])
            .unwrap();
        let r = schouten_curvature(&s, &DVector::zeros(3), 0, 1, 1, &params()).unwrap();
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn curvature_antisymmetry_in_the_plane_arguments() {
        let s = skew_heisenberg();
        let q = DVector::from_vec(vec![0.4, -0.3, 0.2]);
        for k in 0..2 {
            let r01 = schouten_curvature(&s, &q, 0, 1, k, &params()).unwrap();
            let r10 = schouten_curvature(&s, &q, 1, 0, k, &params()).unwrap();
            assert!((&r01 + &r10).amax() < 1e-6);
        }
    }

    #[test]
    fn curvature_metric_skewness_for_metric_preserving_verticals() {
        // Metric skewness g(R(·,·)X_k, X_l) + g(R(·,·)X_l, X_k) = 0 needs the
        // vertical bracket directions to preserve the horizontal metric. A
        // full-rank frame (empty rigging) is the cleanest such case and has
        // genuinely nonzero curvature: this is the invariant-metric frame of
        // a nilpotent group.
        let s = SRStructure::parse(
            3,
            &[
                &["1", "0", "0"],
                &["0", "1", "0"],
                &["0", "q1", "1"],
            ],
            &[],
        )
        .unwrap();
        let q = DVector::from_vec(vec![0.4, -0.3, 0.2]);
        let mut some_nonzero = false;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let rk = schouten_curvature(&s, &q, i, j, k, &params()).unwrap();
                    if rk.amax() > 1e-3 {
                        some_nonzero = true;
                    }
                    for l in 0..3 {
                        let rl = schouten_curvature(&s, &q, i, j, l, &params()).unwrap();
                        assert!((rk[l] + rl[k]).abs() < 1e-5, "skewness {i}{j}{k}{l}");
                    }
                }
            }
        }
        assert!(some_nonzero, "curvature must not vanish identically");
    }

    #[test]
    fn coincidence_on_flat_frame_is_exact() {
        let s = SRStructure::parse(3, &[&["1", "0", "0"], &["0", "1", "0"]], &[&["0", "0", "1"]])
            .unwrap();
        let (gap, _) = compare_straightest_shortest(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![0.3, -0.9]),
            1.0,
            1e-2,
            &params(),
        )
        .unwrap();
        assert!(gap < 1e-13, "flat gap {gap}");
    }

    #[test]
    fn coincidence_on_heisenberg_and_gap_on_skew() {
        let s = heisenberg();
        let (gap, _) = compare_straightest_shortest(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.0]),
            1.0,
            1e-3,
            &params(),
        )
        .unwrap();
        assert!(gap < 1e-8, "heisenberg gap {gap}");
        let (gap, _) = compare_straightest_shortest(
            &skew_heisenberg(),
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.0]),
            1.0,
            1e-3,
            &params(),
        )
        .unwrap();
        assert!(gap > 1e-3, "skew gap {gap}");
    }

    #[test]
    fn rigging_changes_gamma_but_keeps_identities() {
        let s = heisenberg();
        // Mix horizontal directions into the rigging.
        let s2 = s
            .with_rigging(vec![crate::geometry::VectorField::parse(
                3,
                &["0.3", "-0.2", "1"],
            )
            .unwrap()])
            .unwrap();
        let q = DVector::from_vec(vec![0.5, 0.4, -0.1]);
        let t1 = schouten_christoffels(&s, &q).unwrap();
        let t2 = schouten_christoffels(&s2, &q).unwrap();
        let mut differ = false;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    if (t1.gamma(i, j, k) - t2.gamma(i, j, k)).abs() > 1e-6 {
                        differ = true;
                    }
                    assert_abs_diff_eq!(
                        t2.gamma(i, j, k) + t2.gamma(k, j, i),
                        0.0,
                        epsilon = 1e-10
                    );
                }
            }
        }
        assert!(differ, "rigging change must move the connection");
        let c2 = structure_functions(&s2, &q).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_abs_diff_eq!(
                        t2.gamma(i, j, k) - t2.gamma(i, k, j),
                        c2.c(i, j, k),
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn straightest_satisfies_projected_levi_civita() {
        for s in [heisenberg(), skew_heisenberg()] {
            let tr = s_geodesic(
                &s,
                &DVector::zeros(3),
                &DVector::from_vec(vec![1.0, 0.4]),
                1.0,
                1e-3,
                &params(),
            )
            .unwrap();
            let r = straightest_lc_projection_residual(&s, &tr, &params()).unwrap();
            assert!(r < 1e-6, "projection residual {r}");
        }
    }

    #[test]
    fn full_frame_curvature_matches_the_coordinate_riemann_tensor() {
        // With an empty rigging the partial connection is the Levi-Civita
        // connection of the frame metric, so R(X_i,X_j)X_k must agree with
        // the coordinate Riemann tensor of the extension metric contracted
        // with the frame vectors (tensoriality: no derivative corrections).
        let s = SRStructure::parse(
            3,
            &[&["1", "0", "0"], &["0", "1", "0"], &["0", "q1", "1"]],
            &[],
        )
        .unwrap();
        let q = DVector::from_vec(vec![0.3, -0.6, 0.4]);
        let g = metric_extension(&s);
        let p = params();
        let h = p.fd_step_at(&q);
        // ∂_a Γ^d_{bc} by central differences of the Christoffel field.
        let gamma = levi_civita_christoffels(&g, &q, &p).unwrap();
        let mut dgamma = Vec::new();
        for a in 0..3 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[a] += h;
            qm[a] -= h;
            let gp = levi_civita_christoffels(&g, &qp, &p).unwrap();
            let gm = levi_civita_christoffels(&g, &qm, &p).unwrap();
            dgamma.push(move |d: usize, b: usize, c: usize| {
                (gp.gamma(d, b, c) - gm.gamma(d, b, c)) / (2.0 * h)
            });
        }
        let riemann = |d: usize, a: usize, b: usize, c: usize| -> f64 {
            let mut r = dgamma[a](d, b, c) - dgamma[b](d, a, c);
            for e in 0..3 {
                r += gamma.gamma(d, a, e) * gamma.gamma(e, b, c)
                    - gamma.gamma(d, b, e) * gamma.gamma(e, a, c);
            }
            r
        };
        let solver = SchoutenSolver::new(&s);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let ours = solver.curvature(&q, i, j, k, &p).unwrap();
                    let xi = s.frame()[i].eval(&q).unwrap();
                    let xj = s.frame()[j].eval(&q).unwrap();
                    let xk = s.frame()[k].eval(&q).unwrap();
                    let mut coord = DVector::zeros(3);
                    for d in 0..3 {
                        let mut sum = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                for c in 0..3 {
                                    sum += xi[a] * xj[b] * xk[c] * riemann(d, a, b, c);
                                }
                            }
                        }
                        coord[d] = sum;
                    }
                    let coord_frame = s.adapted_coefficients(&q, &coord).unwrap();
                    assert!(
                        (ours - coord_frame).amax() < 1e-4,
                        "curvature mismatch at {i}{j}{k}"
                    );
                }
            }
        }
    }

    #[test]
    fn torsion_reconstructs_bracket_horizontal_part() {
        let s = skew_heisenberg();
        let q = DVector::from_vec(vec![0.2, 0.6, -0.4]);
        let t = schouten_christoffels(&s, &q).unwrap();
        let e = s.adapted_matrix(&q).unwrap();
        let br = bracket(&s.frame()[0], &s.frame()[1], &q).unwrap();
        let coeffs = e.lu().solve(&br).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(
                t.gamma(i, 0, 1) - t.gamma(i, 1, 0),
                coeffs[i],
                epsilon = 1e-10
            );
        }
    }
}
