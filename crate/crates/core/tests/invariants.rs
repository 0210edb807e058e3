//! Cross-module identities on the bundle scenarios: the covariant-derivative
//! exchange between base and total space, lift residuals on the curved-base
//! bundle, and conserved fiber pairings.

use nalgebra::{DMatrix, DVector};

use subriem::geometry::{levi_civita_christoffels, riemannian_geodesic};
use subriem::hamiltonian::flow_pullback_drift;
use subriem::scenarios::load;
use subriem::trajectory::Trajectory;
use subriem::NumericParams;

fn params() -> NumericParams {
    NumericParams::default()
}

/// Lifted coordinate fields satisfy
/// `pr_D ∇^{g^Q}_{X^D_i} X^D_j = (∇^M_{∂_i} ∂_j)^D`: evaluating the ambient
/// Levi-Civita derivative of the lifted frame and projecting kills the
/// vertical curvature term.
#[test]
fn oneill_exchange_of_covariant_derivatives() {
    let sc = load("heisenberg").unwrap();
    let b = sc.bundle.as_ref().unwrap();
    let s = b.chart_structure().unwrap();
    let g_q = b.extension_metric().unwrap();
    for k in 0..10 {
        let q = DVector::from_vec(vec![
            (k as f64 * 0.61).sin(),
            (k as f64 * 0.45).cos(),
            0.2 * k as f64,
        ]);
        let gamma = levi_civita_christoffels(&g_q, &q, &params()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let (xi, _) = s.frame()[i].eval_with_jacobian(&q).unwrap();
                let (_, jj) = s.frame()[j].eval_with_jacobian(&q).unwrap();
                // (∇_X Y)^k = X^a ∂_a Y^k + Γ^k_{ab} X^a Y^b.
                let xj = s.frame()[j].eval(&q).unwrap();
                let mut cov = &jj * &xi;
                for kk in 0..3 {
                    let mut sum = 0.0;
                    for a in 0..3 {
                        for bb in 0..3 {
                            sum += gamma.gamma(kk, a, bb) * xi[a] * xj[bb];
                        }
                    }
                    cov[kk] += sum;
                }
                // The base is flat, so the projected derivative must vanish.
                let coeffs = s.adapted_coefficients(&q, &cov).unwrap();
                let horizontal = coeffs.rows(0, 2).amax();
                assert!(horizontal < 1e-5, "projected derivative {horizontal} at {i}{j}");
            }
        }
    }
}

/// A great circle of the round sphere, written in the stereographic chart,
/// lifts to the circle-bundle total space with a small connection residual.
#[test]
fn hopf_great_circle_lift_is_horizontal() {
    let sc = load("hopf_su2").unwrap();
    let b = sc.bundle.as_ref().unwrap();
    // Equator through the chart point (1,0) at unit sphere speed.
    let curve = |t: f64| {
        Ok((
            DVector::from_vec(vec![t.cos(), t.sin()]),
            DVector::from_vec(vec![-t.sin(), t.cos()]),
        ))
    };
    let lift = b
        .horizontal_lift(
            &curve,
            &b.group.identity(),
            2.0 * std::f64::consts::PI,
            1e-3,
            &params(),
        )
        .unwrap();
    let residual = lift.diagnostics.get("omega_residual").unwrap();
    assert!(residual < 1e-6, "lift residual {residual}");
    // Holonomy of the equator loop: ∫F over the enclosed hemisphere-chart
    // disc = ∫ 2/(1+r²)² over the unit disc = π, and the fiber is a circle,
    // so the lift ends at the rotation by −π (sign from the lift equation).
    let g_end = lift.elements.last().unwrap();
    let expected = subriem::ode::expm(&DMatrix::from_row_slice(
        2,
        2,
        &[0.0, std::f64::consts::PI, -std::f64::consts::PI, 0.0],
    ));
    assert!((g_end - expected).amax() < 1e-7, "holonomy end {g_end}");

    // A lifted base geodesic of the round metric shows the same residual.
    let base = riemannian_geodesic(
        &b.base_metric(),
        &DVector::from_vec(vec![1.0, 0.0]),
        &DVector::from_vec(vec![0.0, 1.0]),
        2.0,
        1e-3,
        &params(),
    )
    .unwrap();
    let lifted = b
        .lift_trajectory(&base, &b.group.identity(), &params())
        .unwrap();
    let residual = lifted.diagnostics.get("omega_residual").unwrap();
    assert!(residual < 1e-6, "trajectory lift residual {residual}");
}

/// Vertical one-parameter orbits are geodesics of the extension metric and
/// their fundamental pairing is the algebra metric value.
#[test]
fn vertical_orbits_conserve_the_fiber_pairing() {
    let sc = load("heisenberg").unwrap();
    let b = sc.bundle.as_ref().unwrap();
    let a = 0.8;
    let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
    let positions: Vec<DVector<f64>> = times
        .iter()
        .map(|t| DVector::from_vec(vec![0.3, -0.2, 0.5 + a * t]))
        .collect();
    let velocities: Vec<DVector<f64>> = times
        .iter()
        .map(|_| DVector::from_vec(vec![0.0, 0.0, a]))
        .collect();
    let mut tr = Trajectory::new(times, positions);
    tr.velocities = Some(velocities);
    let drift = b.charge_conservation(&tr, 0).unwrap();
    assert!(drift < 1e-14);
    // Conserved value: g_alg(e_1, a·e_1) = a.
    let g_q = b.extension_metric().unwrap();
    let v = tr.velocities.as_ref().unwrap()[0].clone();
    let c = (g_q.eval(&tr.positions[0]).unwrap() * v)[2];
    assert!((c - a).abs() < 1e-14, "conserved value {c}");
}

/// Horizontal geodesics of the extension metric stay horizontal and project
/// to base geodesics: lifting the projection reproduces the curve.
#[test]
fn horizontal_full_metric_geodesics_stay_horizontal() {
    let sc = load("heisenberg").unwrap();
    let b = sc.bundle.as_ref().unwrap();
    let g_q = b.extension_metric().unwrap();
    let q0 = DVector::from_vec(vec![0.2, -0.1, 0.4]);
    // Horizontal initial velocity: ϖ(w) = 0.
    let vx = DVector::from_vec(vec![0.7, 0.5]);
    let a = b.potential_pairing(&q0.rows(0, 2).into_owned(), &vx).unwrap();
    let w = DVector::from_vec(vec![vx[0], vx[1], -a[0]]);
    let tr = riemannian_geodesic(&g_q, &q0, &w, 1.0, 1e-3, &params()).unwrap();
    let mut worst: f64 = 0.0;
    for (q, v) in tr.positions.iter().zip(tr.velocities.as_ref().unwrap()) {
        let omega = b.connection_on_chart(q, v).unwrap();
        worst = worst.max(omega.amax());
    }
    assert!(worst < 1e-9, "horizontality drift {worst}");
    // The projection is the straight line (flat base): the position must
    // advance linearly in x, y.
    let last = tr.positions.last().unwrap();
    assert!((last[0] - (q0[0] + vx[0])).abs() < 1e-9);
    assert!((last[1] - (q0[1] + vx[1])).abs() < 1e-9);
}

/// The two straightest-geodesic routes agree: the chart Schouten solver and
/// the base-geodesic-plus-lift route through the bundle.
#[test]
fn straightest_chart_and_lift_routes_agree() {
    let sc = load("heisenberg").unwrap();
    let b = sc.bundle.as_ref().unwrap();
    let s = sc.structure.as_ref().unwrap();
    let x0 = DVector::from_vec(vec![0.2, -0.3]);
    let v0 = DVector::from_vec(vec![0.8, 0.6]);
    let (base, lift) = b
        .straightest_geodesic_via_lift(&x0, &v0, &b.group.identity(), 1.0, 1e-3, &params())
        .unwrap();
    let q0 = DVector::from_vec(vec![x0[0], x0[1], 0.0]);
    let chart = subriem::schouten::s_geodesic(s, &q0, &v0, 1.0, 1e-3, &params()).unwrap();
    let mut gap: f64 = 0.0;
    for ((x, g), q) in base
        .positions
        .iter()
        .zip(&lift.elements)
        .zip(&chart.positions)
    {
        gap = gap.max((x[0] - q[0]).abs()).max((x[1] - q[1]).abs());
        let z = b.group.vector_chart_coords(g).unwrap()[0];
        gap = gap.max((z - q[2]).abs());
    }
    assert!(gap < 1e-6, "route gap {gap}");
}

/// Flow-level factorization on the chart: flowing a covector by the
/// sub-Riemannian Hamiltonian equals flowing it by the full extension-metric
/// geodesic flow and then by the inverse fiber flow. The fiber Hamiltonian
/// here is `½ p_z²`, whose time-(−T) flow shifts `z` by `−T·p_z`.
#[test]
fn hamiltonian_flow_factorizes_through_the_extension_metric() {
    let sc = load("heisenberg").unwrap();
    let b = sc.bundle.as_ref().unwrap();
    let s = sc.structure.as_ref().unwrap();
    let g_q = b.extension_metric().unwrap();
    let t_end = 1.0;
    let q0 = DVector::from_vec(vec![0.3, -0.2, 0.5]);
    let p0 = DVector::from_vec(vec![0.9, 0.4, -0.7]);

    // Sub-Riemannian route.
    let (v0, lambda) = subriem::hamiltonian::covector_components(s, &q0, &p0).unwrap();
    let sr = subriem::hamiltonian::normal_geodesic(s, &q0, &v0, &lambda, t_end, 1e-3, &params())
        .unwrap();
    let q_sr = sr.positions.last().unwrap();
    let p_sr = sr.momenta.as_ref().unwrap().last().unwrap();

    // Full-metric route with a Legendre transform at both ends, then the
    // inverse fiber flow.
    let w0 = g_q.eval_inverse(&q0).unwrap() * &p0;
    let full = riemannian_geodesic(&g_q, &q0, &w0, t_end, 1e-3, &params()).unwrap();
    let mut q_full = full.positions.last().unwrap().clone();
    let v_full = full.velocities.as_ref().unwrap().last().unwrap();
    let p_full = g_q.eval(&q_full).unwrap() * v_full;
    q_full[2] -= t_end * p_full[2];

    assert!((q_sr - &q_full).amax() < 1e-8, "position gap");
    assert!((p_sr - &p_full).amax() < 1e-8, "momentum gap");
}

/// Base projections of normal geodesics are charged-particle orbits: the
/// rigging pairing of the initial covector is the charge. Two entirely
/// different solvers (cotangent flow upstairs, base second-order equation
/// with the curvature force) must produce the same planar curve.
#[test]
fn normal_geodesics_project_to_charged_orbits() {
    let sc = load("heisenberg").unwrap();
    let b = sc.bundle.as_ref().unwrap();
    let s = sc.structure.as_ref().unwrap();
    for (lambda, v0) in [(0.8, [1.0, 0.0]), (-0.5, [0.6, 0.8])] {
        let upstairs = subriem::hamiltonian::normal_geodesic(
            s,
            &DVector::zeros(3),
            &DVector::from_column_slice(&v0),
            &DVector::from_vec(vec![lambda]),
            2.0,
            1e-3,
            &params(),
        )
        .unwrap();
        let base = b
            .wong_dynamics(
                &DVector::zeros(2),
                &DVector::from_column_slice(&v0),
                &DVector::from_vec(vec![lambda]),
                2.0,
                1e-3,
                &params(),
            )
            .unwrap();
        let mut gap: f64 = 0.0;
        for (q, x) in upstairs.positions.iter().zip(&base.positions) {
            gap = gap.max((q[0] - x[0]).abs()).max((q[1] - x[1]).abs());
        }
        assert!(gap < 1e-9, "λ={lambda}: projection gap {gap}");
    }
}

/// Parallel transport preserves the horizontal norm along generic
/// (non-geodesic) horizontal curves.
#[test]
fn transport_norms_survive_generic_horizontal_curves() {
    let sc = load("skew_heisenberg").unwrap();
    let s = sc.structure.as_ref().unwrap();
    let control = |t: f64| {
        DVector::from_vec(vec![(1.7 * t).cos() + 0.2, (0.9 * t).sin() - 0.1])
    };
    let tr = subriem::hamiltonian::horizontal_curve_from_control(
        s,
        &DVector::zeros(3),
        &control,
        1.0,
        1e-3,
        &params(),
    )
    .unwrap();
    let (_, drift) = subriem::schouten::parallel_transport(
        s,
        &tr,
        &DVector::from_vec(vec![0.6, -1.1]),
    )
    .unwrap();
    assert!(drift < 1e-8, "norm drift {drift}");
}

/// Extremal covectors pair constantly with flow-transported vectors on every
/// chart scenario.
#[test]
fn extremal_pairing_is_flow_invariant() {
    for name in ["heisenberg", "martinet", "skew_heisenberg"] {
        let sc = load(name).unwrap();
        let s = sc.structure.as_ref().unwrap();
        let drift = flow_pullback_drift(
            s,
            &DVector::zeros(3),
            &DVector::from_vec(vec![1.0, 0.3]),
            &DVector::from_vec(vec![0.8]),
            &DVector::from_vec(vec![0.2, -0.5, 0.9]),
            1.0,
            1e-3,
            &params(),
        )
        .unwrap();
        assert!(drift < 1e-6, "{name}: pairing drift {drift}");
    }
}
