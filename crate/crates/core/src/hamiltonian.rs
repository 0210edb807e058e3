//! Hamiltonian flow on `T*Q` for the quadratic Hamiltonian
//! `h(q,p) = ½ Σ_{ij} (g_D^{-1})_{ij} ⟨p, X_i(q)⟩ ⟨p, X_j(q)⟩`
//! whose projections to `Q` are the normal geodesics.
//!
//! Covectors are stored in the coordinate coframe `dq^i`, so the symplectic
//! form is the canonical `ω = dp ∧ dq` and the flow equations are exactly
//! `q̇ = ∂h/∂p`, `ṗ = −∂h/∂q`. The momentum gradient `∂h/∂q` uses exact
//! frame Jacobians; the finite-difference Poisson bracket below provides an
//! independent cross-check of that path.

use nalgebra::{DMatrix, DVector};

use crate::geometry::{stack, SRStructure};
use crate::trajectory::Trajectory;
use crate::{Error, NumericParams, Result};

/// A point of `T*Q` in chart coordinates.
#[derive(Debug, Clone)]
pub struct CotangentState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl CotangentState {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Self {
        CotangentState { q, p }
    }
}

/// Frame pairings `u_i = ⟨p, X_i(q)⟩`.
fn frame_pairings(s: &SRStructure, q: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
    let mut u = DVector::zeros(s.rank());
    for (i, x) in s.frame().iter().enumerate() {
        u[i] = p.dot(&x.eval(q)?);
    }
    Ok(u)
}

/// The sub-Riemannian Hamiltonian at a cotangent state.
pub fn sr_hamiltonian(s: &SRStructure, st: &CotangentState) -> Result<f64> {
    let u = frame_pairings(s, &st.q, &st.p)?;
    Ok(0.5 * (u.transpose() * s.cometric() * &u)[(0, 0)])
}

/// Hamiltonian vector field `(q̇, ṗ) = (∂h/∂p, −∂h/∂q)`.
/// `∂h/∂p` comes from frame values, `∂h/∂q` from exact frame Jacobians.
pub fn hamiltonian_vector_field(
    s: &SRStructure,
    st: &CotangentState,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = s.dim();
    let m = s.rank();
    let mut values = Vec::with_capacity(m);
    let mut jacobians = Vec::with_capacity(m);
    for x in s.frame() {
        let (v, j) = x.eval_with_jacobian(&st.q)?;
        values.push(v);
        jacobians.push(j);
    }
    let mut u = DVector::zeros(m);
    for i in 0..m {
        u[i] = st.p.dot(&values[i]);
    }
    // Controls: u^i = (g_D^{-1} u)_i, and q̇ = Σ u^i X_i.
    let controls = s.cometric() * &u;
    let mut q_dot = DVector::zeros(n);
    for i in 0..m {
        q_dot += &values[i] * controls[i];
    }
    // ṗ_c = −Σ_i controls_i · p_a ∂X_i^a/∂q_c.
    let mut p_dot = DVector::zeros(n);
    for i in 0..m {
        let jt_p = jacobians[i].transpose() * &st.p;
        p_dot -= jt_p * controls[i];
    }
    Ok((q_dot, p_dot))
}

/// The unique covector with `⟨p, X_i(q)⟩ = (g_D v)_i` and `⟨p, Y_α(q)⟩ = λ_α`;
/// its Hamiltonian velocity reproduces the horizontal vector `v^i X_i(q)`.
pub fn initial_covector(
    s: &SRStructure,
    q: &DVector<f64>,
    v: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DVector<f64>> {
    if v.len() != s.rank() || lambda.len() != s.corank() {
        return Err(Error::Config(format!(
            "initial data needs {} frame coefficients and {} rigging pairings",
            s.rank(),
            s.corank()
        )));
    }
    let rhs = stack(&(s.metric() * v), lambda);
    let e = s.adapted_matrix(q)?;
    e.transpose()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularFrame {
            point: q.as_slice().to_vec(),
        })
}

/// Project a covector back to `(v, λ)`: frame coefficients of the dual
/// horizontal vector and rigging pairings.
pub fn covector_components(
    s: &SRStructure,
    q: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let u = frame_pairings(s, q, p)?;
    let v = s.cometric() * u;
    let mut lambda = DVector::zeros(s.corank());
    for (a, y) in s.rigging().iter().enumerate() {
        lambda[a] = p.dot(&y.eval(q)?);
    }
    Ok((v, lambda))
}

/// Normal geodesic through `q0` with horizontal velocity `v0` (frame
/// coefficients) and initial rigging pairings `λ`.
///
/// Records controls `u^i(t) = Σ_j (g_D^{-1})_{ij} ⟨p, X_j⟩`, the relative
/// energy drift, the maximal rigging component of `q̇` (horizontality), the
/// normal-condition residual and the drift of `g_D(u,u)`.
pub fn normal_geodesic(
    s: &SRStructure,
    q0: &DVector<f64>,
    v0: &DVector<f64>,
    lambda: &DVector<f64>,
    t_end: f64,
    h: f64,
    params: &NumericParams,
) -> Result<Trajectory> {
    let p0 = initial_covector(s, q0, v0, lambda)?;
    let n = s.dim();
    let y0 = stack(q0, &p0);
    let f = |_t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let st = CotangentState::new(y.rows(0, n).into_owned(), y.rows(n, n).into_owned());
        let (q_dot, p_dot) = hamiltonian_vector_field(s, &st)?;
        Ok(stack(&q_dot, &p_dot))
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
    let momenta: Vec<DVector<f64>> = ys.iter().map(|y| y.rows(n, n).into_owned()).collect();
    let mut controls = Vec::with_capacity(times.len());
    let mut velocities = Vec::with_capacity(times.len());

    let mut h0 = 0.0;
    let mut energy_drift: f64 = 0.0;
    let mut horizontality: f64 = 0.0;
    let mut speed0 = 0.0;
    let mut speed_drift: f64 = 0.0;
    for (k, (q, p)) in positions.iter().zip(&momenta).enumerate() {
        let st = CotangentState::new(q.clone(), p.clone());
        let energy = sr_hamiltonian(s, &st)?;
        let u = s.cometric() * frame_pairings(s, q, p)?;
        let q_dot = s.horizontal_vector(q, &u)?;
        let speed = (u.transpose() * s.metric() * &u)[(0, 0)];
        if k == 0 {
            h0 = energy;
            speed0 = speed;
        } else {
            energy_drift = energy_drift.max((energy - h0).abs());
            speed_drift = speed_drift.max((speed - speed0).abs());
        }
        // Rigging components of q̇ in the adapted frame.
        if s.corank() > 0 {
            let coeffs = s.adapted_coefficients(q, &q_dot)?;
            horizontality = horizontality.max(coeffs.rows(s.rank(), s.corank()).amax());
        }
        velocities.push(q_dot);
        controls.push(u);
    }

    let mut tr = Trajectory::new(times, positions);
    tr.momenta = Some(momenta);
    tr.velocities = Some(velocities);
    tr.controls = Some(controls);
    tr.diagnostics
        .set("energy_drift_rel", energy_drift / h0.abs().max(1e-300));
    tr.diagnostics.set("horizontality", horizontality);
    tr.diagnostics
        .set("speed_drift", speed_drift / speed0.abs().max(1e-300));
    let pmp = pmp_normal_residual(s, &tr)?;
    tr.diagnostics.set("pmp_residual", pmp);
    Ok(tr)
}

/// Residual of the normal extremal condition `g_D·u(t) = (⟨p(t), X_i(q)⟩)_i`,
/// maximal over the trajectory.
pub fn pmp_normal_residual(s: &SRStructure, tr: &Trajectory) -> Result<f64> {
    let momenta = tr.momenta.as_ref().ok_or(Error::MissingControls)?;
    let controls = tr.controls.as_ref().ok_or(Error::MissingControls)?;
    let mut residual: f64 = 0.0;
    for ((q, p), u) in tr.positions.iter().zip(momenta).zip(controls) {
        let pairing = frame_pairings(s, q, p)?;
        residual = residual.max((s.metric() * u - pairing).amax());
    }
    Ok(residual)
}

/// Finite-difference canonical Poisson bracket
/// `{f, g} = Σ_i (∂f/∂q_i ∂g/∂p_i − ∂f/∂p_i ∂g/∂q_i)` with central
/// differences of step `h_fd` in every coordinate.
pub fn poisson_bracket(
    f: &dyn Fn(&CotangentState) -> Result<f64>,
    g: &dyn Fn(&CotangentState) -> Result<f64>,
    st: &CotangentState,
    h_fd: f64,
) -> Result<f64> {
    let n = st.q.len();
    let diff_q = |func: &dyn Fn(&CotangentState) -> Result<f64>, i: usize| -> Result<f64> {
        let mut sp = st.clone();
        let mut sm = st.clone();
        sp.q[i] += h_fd;
        sm.q[i] -= h_fd;
        Ok((func(&sp)? - func(&sm)?) / (2.0 * h_fd))
    };
    let diff_p = |func: &dyn Fn(&CotangentState) -> Result<f64>, i: usize| -> Result<f64> {
        let mut sp = st.clone();
        let mut sm = st.clone();
        sp.p[i] += h_fd;
        sm.p[i] -= h_fd;
        Ok((func(&sp)? - func(&sm)?) / (2.0 * h_fd))
    };
    let mut sum = 0.0;
    for i in 0..n {
        sum += diff_q(f, i)? * diff_p(g, i)? - diff_p(f, i)? * diff_q(g, i)?;
    }
    Ok(sum)
}

/// Integrate the horizontal curve `q̇ = Σ u^i(t) X_i(q)` for a given control
/// function; records the control at the nodes, the energy functional
/// `½∫ g_D(u,u) dt` and the length `∫ √g_D(u,u) dt` by quadrature on the
/// same grid.
pub fn horizontal_curve_from_control(
    s: &SRStructure,
    q0: &DVector<f64>,
    control: &dyn Fn(f64) -> DVector<f64>,
    t_end: f64,
    h: f64,
    params: &NumericParams,
) -> Result<Trajectory> {
    let n = s.dim();
    // State: (q, accumulated energy, accumulated length).
    let mut y0 = DVector::zeros(n + 2);
    y0.rows_mut(0, n).copy_from(q0);
    let f = |t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let q = y.rows(0, n).into_owned();
        let u = control(t);
        let q_dot = s.horizontal_vector(&q, &u)?;
        let uu = (u.transpose() * s.metric() * &u)[(0, 0)];
        let mut dy = DVector::zeros(n + 2);
        dy.rows_mut(0, n).copy_from(&q_dot);
        dy[n] = 0.5 * uu;
        dy[n + 1] = uu.max(0.0).sqrt();
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
    let mut controls = Vec::with_capacity(times.len());
    let mut velocities = Vec::with_capacity(times.len());
    for (t, q) in times.iter().zip(&positions) {
        let u = control(*t);
        velocities.push(s.horizontal_vector(q, &u)?);
        controls.push(u);
    }
    let last = ys.last().unwrap();
    let mut tr = Trajectory::new(times, positions);
    tr.velocities = Some(velocities);
    tr.controls = Some(controls);
    tr.diagnostics.set("energy_functional", last[n]);
    tr.diagnostics.set("length", last[n + 1]);
    Ok(tr)
}

/// Drift of `⟨p(t), w(t)⟩` where `w` is transported along the geodesic by the
/// linearized flow of the non-autonomous field `Σ u^i(t) X_i`. The extremal is
/// the flow pullback of its initial covector, so the pairing is conserved.
#[allow(clippy::too_many_arguments)]
pub fn flow_pullback_drift(
    s: &SRStructure,
    q0: &DVector<f64>,
    v0: &DVector<f64>,
    lambda: &DVector<f64>,
    w0: &DVector<f64>,
    t_end: f64,
    h: f64,
    params: &NumericParams,
) -> Result<f64> {
    let p0 = initial_covector(s, q0, v0, lambda)?;
    let n = s.dim();
    let m = s.rank();
    let y0 = stack(&stack(q0, &p0), w0);
    let f = |_t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let st = CotangentState::new(y.rows(0, n).into_owned(), y.rows(n, n).into_owned());
        let w = y.rows(2 * n, n).into_owned();
        let (q_dot, p_dot) = hamiltonian_vector_field(s, &st)?;
        // Variational equation: ẇ = (Σ u^i J_{X_i}) w.
        let mut u = DVector::zeros(m);
        let mut jac_sum = DMatrix::zeros(n, n);
        let mut values = Vec::with_capacity(m);
        let mut jacs = Vec::with_capacity(m);
        for x in s.frame() {
            let (v, j) = x.eval_with_jacobian(&st.q)?;
            values.push(v);
            jacs.push(j);
        }
        for i in 0..m {
            u[i] = st.p.dot(&values[i]);
        }
        let controls = s.cometric() * &u;
        for i in 0..m {
            jac_sum += &jacs[i] * controls[i];
        }
        Ok(stack(&stack(&q_dot, &p_dot), &(jac_sum * w)))
    };
    let guard = |t: f64, y: &DVector<f64>| -> Result<()> {
        let norm = y.rows(0, n).norm();
        if norm > params.blowup {
            return Err(Error::BlowUp { t, norm });
        }
        Ok(())
    };
    let (_, ys) = crate::ode::rk4(f, y0, 0.0, t_end, h, guard)?;
    let pairing =
        |y: &DVector<f64>| y.rows(n, n).into_owned().dot(&y.rows(2 * n, n).into_owned());
    let c0 = pairing(&ys[0]);
    let mut drift: f64 = 0.0;
    for y in ys.iter().skip(1) {
        drift = drift.max((pairing(y) - c0).abs());
    }
    Ok(drift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn heisenberg() -> SRStructure {
        SRStructure::parse(
            3,
            &[&["1", "0", "-q2/2"], &["0", "1", "q1/2"]],
            &[&["0", "0", "1"]],
        )
        .unwrap()
    }

    /// Closed-form Heisenberg normal geodesic from the origin with v0 = (1,0)
    /// and rigging pairing λ: controls rotate at rate λ, the planar
    /// projection is a circle of radius 1/λ, and z grows with the swept area.
    fn heisenberg_exact(lambda: f64, t: f64) -> DVector<f64> {
        if lambda == 0.0 {
            return DVector::from_vec(vec![t, 0.0, 0.0]);
        }
        let x = (lambda * t).sin() / lambda;
        let y = (1.0 - (lambda * t).cos()) / lambda;
        let z = (lambda * t - (lambda * t).sin()) / (2.0 * lambda * lambda);
        DVector::from_vec(vec![x, y, z])
    }

    #[test]
    fn hamiltonian_examples() {
        let s = heisenberg();
        // p annihilating the distribution gives zero.
        let q = DVector::from_vec(vec![0.7, -0.4, 0.3]);
        let st = CotangentState::new(
            q.clone(),
            initial_covector(&s, &q, &DVector::zeros(2), &DVector::from_vec(vec![3.0])).unwrap(),
        );
        assert_abs_diff_eq!(sr_hamiltonian(&s, &st).unwrap(), 0.0, epsilon = 1e-14);
        // Hand evaluation at the origin.
        let st = CotangentState::new(DVector::zeros(3), DVector::from_vec(vec![1.0, 0.0, 5.0]));
        assert_abs_diff_eq!(sr_hamiltonian(&s, &st).unwrap(), 0.5, epsilon = 1e-14);
        // Quadratic scaling.
        let st2 = CotangentState::new(st.q.clone(), &st.p * 2.0);
        assert_abs_diff_eq!(sr_hamiltonian(&s, &st2).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn vector_field_flat_frame_is_free_particle() {
        let s = SRStructure::parse(2, &[&["1", "0"], &["0", "1"]], &[]).unwrap();
        let st = CotangentState::new(
            DVector::from_vec(vec![0.3, 0.4]),
            DVector::from_vec(vec![1.0, 0.0]),
        );
        let (q_dot, p_dot) = hamiltonian_vector_field(&s, &st).unwrap();
        assert_eq!(q_dot, DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(p_dot, DVector::zeros(2));
    }

    #[test]
    fn hamiltonian_gradient_matches_finite_differences() {
        let s = heisenberg();
        let st = CotangentState::new(
            DVector::from_vec(vec![0.2, -0.3, 0.5]),
            DVector::from_vec(vec![1.0, 0.4, 1.0]),
        );
        let (q_dot, p_dot) = hamiltonian_vector_field(&s, &st).unwrap();
        let h_fd = 1e-6;
        for c in 0..3 {
            let mut sp = st.clone();
            let mut sm = st.clone();
            sp.q[c] += h_fd;
            sm.q[c] -= h_fd;
            let dq = (sr_hamiltonian(&s, &sp).unwrap() - sr_hamiltonian(&s, &sm).unwrap())
                / (2.0 * h_fd);
            assert_abs_diff_eq!(p_dot[c], -dq, epsilon = 1e-8);
            let mut sp = st.clone();
            let mut sm = st.clone();
            sp.p[c] += h_fd;
            sm.p[c] -= h_fd;
            let dp = (sr_hamiltonian(&s, &sp).unwrap() - sr_hamiltonian(&s, &sm).unwrap())
                / (2.0 * h_fd);
            assert_abs_diff_eq!(q_dot[c], dp, epsilon = 1e-8);
        }
        // dh/dt along the field vanishes by antisymmetry.
        let mut grad_q = DVector::zeros(3);
        let mut grad_p = DVector::zeros(3);
        for c in 0..3 {
            grad_q[c] = -p_dot[c];
            grad_p[c] = q_dot[c];
        }
        assert!((grad_q.dot(&q_dot) + grad_p.dot(&p_dot)).abs() < 1e-12);
    }

    #[test]
    fn initial_covector_round_trip() {
        let s = heisenberg();
        let q = DVector::from_vec(vec![0.5, 1.5, -2.0]);
        let v = DVector::from_vec(vec![0.3, -0.8]);
        let lambda = DVector::from_vec(vec![1.7]);
        let p = initial_covector(&s, &q, &v, &lambda).unwrap();
        let (v2, l2) = covector_components(&s, &q, &p).unwrap();
        assert!((v - v2).amax() < 1e-12);
        assert!((lambda - l2).amax() < 1e-12);
        // Zero data is the rest solution.
        let p0 = initial_covector(&s, &q, &DVector::zeros(2), &DVector::zeros(1)).unwrap();
        assert_eq!(p0.amax(), 0.0);
    }

    #[test]
    fn flat_frame_initial_covector_pads_with_zeros() {
        let s = SRStructure::parse(3, &[&["1", "0", "0"], &["0", "1", "0"]], &[&["0", "0", "1"]])
            .unwrap();
        let p = initial_covector(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![0.4, -0.2]),
            &DVector::zeros(1),
        )
        .unwrap();
        assert_eq!(p, DVector::from_vec(vec![0.4, -0.2, 0.0]));
    }

    #[test]
    fn heisenberg_straight_line_when_lambda_zero() {
        let s = heisenberg();
        let tr = normal_geodesic(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.0]),
            &DVector::zeros(1),
            1.0,
            1e-3,
            &NumericParams::default(),
        )
        .unwrap();
        for (t, q) in tr.times.iter().zip(&tr.positions).step_by(100) {
            assert!((q - heisenberg_exact(0.0, *t)).amax() < 1e-10);
        }
    }

    #[test]
    fn heisenberg_circles_match_closed_form() {
        let s = heisenberg();
        for lambda in [0.5, 1.0, 2.0] {
            let period = 2.0 * std::f64::consts::PI / lambda;
            let tr = normal_geodesic(
                &s,
                &DVector::zeros(3),
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::from_vec(vec![lambda]),
                period,
                1e-3,
                &NumericParams::default(),
            )
            .unwrap();
            let mut worst: f64 = 0.0;
            for (t, q) in tr.times.iter().zip(&tr.positions) {
                worst = worst.max((q - heisenberg_exact(lambda, *t)).amax());
            }
            assert!(worst < 1e-8, "λ={lambda}: worst {worst}");
            assert!(tr.diagnostics.get("energy_drift_rel").unwrap() < 1e-10);
            assert!(tr.diagnostics.get("horizontality").unwrap() < 1e-10);
            assert!(tr.diagnostics.get("pmp_residual").unwrap() < 1e-12);
        }
    }

    #[test]
    fn pmp_residual_detects_perturbed_momenta() {
        let s = heisenberg();
        let mut tr = normal_geodesic(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.0]),
            &DVector::from_vec(vec![1.0]),
            1.0,
            1e-2,
            &NumericParams::default(),
        )
        .unwrap();
        assert!(pmp_normal_residual(&s, &tr).unwrap() < 1e-12);
        for p in tr.momenta.as_mut().unwrap() {
            p[0] += 1e-3;
        }
        let r = pmp_normal_residual(&s, &tr).unwrap();
        assert!(r > 2e-4 && r < 5e-3, "residual {r}");
        // A trajectory without momenta is rejected.
        let mut no_p = tr.clone();
        no_p.momenta = None;
        assert!(matches!(
            pmp_normal_residual(&s, &no_p),
            Err(Error::MissingControls)
        ));
        // The rest solution has an exactly zero residual.
        let rest = normal_geodesic(
            &s,
            &DVector::zeros(3),
            &DVector::zeros(2),
            &DVector::zeros(1),
            0.5,
            1e-2,
            &NumericParams::default(),
        )
        .unwrap();
        assert_eq!(pmp_normal_residual(&s, &rest).unwrap(), 0.0);
    }

    #[test]
    fn canonical_poisson_pairs() {
        let st = CotangentState::new(
            DVector::from_vec(vec![0.3, -0.2, 0.9]),
            DVector::from_vec(vec![0.1, 0.7, -0.5]),
        );
        let q1 = |s: &CotangentState| Ok(s.q[0]);
        let p1 = |s: &CotangentState| Ok(s.p[0]);
        let b = poisson_bracket(&q1, &p1, &st, 1e-5).unwrap();
        assert_abs_diff_eq!(b, 1.0, epsilon = 1e-8);
        let f = |s: &CotangentState| Ok(s.q[1] * s.p[2] + s.q[0].sin());
        let ff = poisson_bracket(&f, &f, &st, 1e-5).unwrap();
        assert!(ff.abs() < 1e-12);
    }

    #[test]
    fn control_reintegration_reproduces_normal_geodesic() {
        let s = heisenberg();
        let lambda = 1.3;
        let tr = normal_geodesic(
            &s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.0]),
            &DVector::from_vec(vec![lambda]),
            1.0,
            1e-3,
            &NumericParams::default(),
        )
        .unwrap();
        // Heisenberg controls rotate at rate λ; reintegrate them.
        let control =
            move |t: f64| DVector::from_vec(vec![(lambda * t).cos(), (lambda * t).sin()]);
        let tr2 = horizontal_curve_from_control(
            &s,
            &DVector::zeros(3),
            &control,
            1.0,
            1e-3,
            &NumericParams::default(),
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for (a, b) in tr.positions.iter().zip(&tr2.positions) {
            worst = worst.max((a - b).amax());
        }
        assert!(worst < 1e-6, "worst {worst}");
        // Energy of a unit-speed control over T: E = T/2; length = T.
        assert_abs_diff_eq!(
            tr2.diagnostics.get("energy_functional").unwrap(),
            0.5,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(tr2.diagnostics.get("length").unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn constant_control_on_flat_frame_is_straight() {
        let s = SRStructure::parse(2, &[&["1", "0"], &["0", "1"]], &[]).unwrap();
        let control = |_t: f64| DVector::from_vec(vec![1.0, 0.0]);
        let tr = horizontal_curve_from_control(
            &s,
            &DVector::zeros(2),
            &control,
            2.0,
            1e-2,
            &NumericParams::default(),
        )
        .unwrap();
        let last = tr.positions.last().unwrap();
        assert_abs_diff_eq!(last[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            tr.diagnostics.get("energy_functional").unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // Zero control stays put with zero length.
        let zero = |_t: f64| DVector::zeros(2);
        let tr = horizontal_curve_from_control(
            &s,
            &DVector::zeros(2),
            &zero,
            1.0,
            1e-2,
            &NumericParams::default(),
        )
        .unwrap();
        assert_eq!(tr.positions.last().unwrap().amax(), 0.0);
        assert_eq!(tr.diagnostics.get("length").unwrap(), 0.0);
    }

    #[test]
    fn flow_pullback_pairing_is_conserved() {
        let s = heisenberg();
        for w0 in [
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DVector::from_vec(vec![0.2, -1.0, 0.7]),
        ] {
            let drift = flow_pullback_drift(
                &s,
                &DVector::zeros(3),
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::from_vec(vec![1.5]),
                &w0,
                1.0,
                1e-3,
                &NumericParams::default(),
            )
            .unwrap();
            assert!(drift < 1e-6, "drift {drift}");
        }
    }

    #[test]
    fn blow_up_is_detected() {
        // A quadratically growing frame escapes in finite time (q = tan-type
        // orbit with a pole near t ≈ 0.16).
        let s = SRStructure::parse(1, &[&["q1^2 + 1"]], &[]).unwrap();
        let params = NumericParams {
            blowup: 1e4,
            ..NumericParams::default()
        };
        let err = normal_geodesic(
            &s,
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![5.0]),
            &DVector::zeros(0),
            2.0,
            1e-3,
            &params,
        );
        match err {
            Err(Error::BlowUp { t, norm }) => {
                assert!(t < 2.0);
                assert!(norm > 1e4);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}
