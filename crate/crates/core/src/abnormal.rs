//! Abnormal geodesics: projections of characteristic curves of the
//! annihilator codistribution, computed from the characteristic system
//!
//! * the curve is horizontal: `γ̇ = Σ w^i X_i(γ)`,
//! * the fiber covector `η = k_α η^α` evolves by
//!   `k̇_β = k_α c^α_{iβ} w^i`,
//! * the velocity is confined to the kernel of the restricted two-form:
//!   `k_α c^α_{ij} w^j = 0`,
//!
//! with `c` the structure functions of the adapted frame. These curves never
//! see the horizontal metric, which the tests verify at the trajectory level.
//!
//! The system determines `γ̇` only up to the kernel, so a steering rule picks
//! the direction: by default the previous direction is projected onto the
//! current kernel (first step: first kernel basis vector). Kernel dimension
//! changes terminate the run with a labeled status because the characteristic
//! variety need not be a bundle across strata.

use nalgebra::{DMatrix, DVector};

use crate::geometry::{structure_functions, SRStructure, StructureCoeffs};
use crate::trajectory::Trajectory;
use crate::{Error, NumericParams, Result};

/// A point of the annihilator bundle: base point plus fiber coordinates
/// `k_α` of `η = k_α η^α` in the adapted coframe; the zero section is
/// excluded.
#[derive(Debug, Clone)]
pub struct CodistState {
    pub q: DVector<f64>,
    pub k: DVector<f64>,
}

impl CodistState {
    pub fn new(q: DVector<f64>, k: DVector<f64>) -> Self {
        CodistState { q, k }
    }
}

/// Custom steering rule `(q, k, kernel basis, previous direction) -> unit
/// vector in the kernel`.
pub type SteeringFn =
    dyn Fn(&DVector<f64>, &DVector<f64>, &[DVector<f64>], Option<&DVector<f64>>) -> DVector<f64>;

/// How the solver selects `γ̇` inside the characteristic kernel.
pub enum Steering<'a> {
    /// Project the previous direction onto the current kernel and normalize;
    /// the first step takes the first kernel basis vector.
    Continuity,
    Custom(&'a SteeringFn),
}

/// Terminal status of an abnormal run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbnormalStatus {
    Completed,
    /// The kernel dimension changed mid-run; the curve up to that event is
    /// returned.
    KernelDimensionChanged { from: usize, to: usize },
}

/// Result of the characteristic solver: base trajectory with the fiber
/// covector curve in the `fiber` channel and the chosen kernel directions in
/// the `controls` channel.
#[derive(Debug)]
pub struct AbnormalRun {
    pub trajectory: Trajectory,
    pub status: AbnormalStatus,
}

/// The matrix `M_{ij} = Σ_α k_α c^α_{ij}` whose kernel constrains `γ̇`.
fn characteristic_matrix(s: &SRStructure, c: &StructureCoeffs, k: &DVector<f64>) -> DMatrix<f64> {
    let m = s.rank();
    let mut mat = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let mut sum = 0.0;
            for (alpha, ka) in k.iter().enumerate() {
                sum += ka * c.c(s.rank() + alpha, i, j);
            }
            mat[(i, j)] = sum;
        }
    }
    mat
}

/// Orthonormal basis of the characteristic kernel
/// `{w : Σ_α k_α c^α_{ij} w^j = 0 ∀i}` at a codistribution point, by SVD
/// thresholding; the whole of `R^m` when the matrix vanishes.
pub fn kernel_basis(
    s: &SRStructure,
    st: &CodistState,
    tol: f64,
) -> Result<Vec<DVector<f64>>> {
    if st.k.norm() == 0.0 {
        return Err(Error::Precondition(
            "codistribution covector must be nonzero".into(),
        ));
    }
    let c = structure_functions(s, &st.q)?;
    let mat = characteristic_matrix(s, &c, &st.k);
    Ok(kernel_of_matrix(&mat, &st.k, tol))
}

fn kernel_of_matrix(mat: &DMatrix<f64>, k: &DVector<f64>, tol: f64) -> Vec<DVector<f64>> {
    let m = mat.nrows();
    // An exactly (or numerically) vanishing matrix has full kernel; return
    // the coordinate basis for determinism.
    if mat.amax() <= 1e-14 * k.norm().max(1.0) {
        return (0..m)
            .map(|i| {
                let mut e = DVector::zeros(m);
                e[i] = 1.0;
                e
            })
            .collect();
    }
    let svd = mat.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd");
    let smax = svd.singular_values.max();
    // Sort ascending by singular value; kernel vectors come first.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[a]
            .partial_cmp(&svd.singular_values[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut basis = Vec::new();
    for idx in order {
        if svd.singular_values[idx] <= tol * smax {
            basis.push(v_t.row(idx).transpose());
        }
    }
    basis
}

fn steer_direction(
    steering: &Steering,
    q: &DVector<f64>,
    k: &DVector<f64>,
    basis: &[DVector<f64>],
    prev: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    match steering {
        Steering::Custom(f) => Ok(f(q, k, basis, prev)),
        Steering::Continuity => {
            let w = match prev {
                None => basis[0].clone(),
                Some(p) => {
                    let mut proj = DVector::zeros(p.len());
                    for b in basis {
                        proj += b * b.dot(p);
                    }
                    let norm = proj.norm();
                    if norm < 0.5 * p.norm() {
                        // The kernel rotated away from the running direction;
                        // continuation is ambiguous.
                        return Err(Error::KernelCollapsed { t: f64::NAN });
                    }
                    proj / norm
                }
            };
            Ok(w)
        }
    }
}

/// Integrate a characteristic curve from `st0` for time `t_end` with step
/// `h`. Equation-iii and horizontality residuals, and the minimal fiber norm,
/// are recorded in the trajectory diagnostics.
pub fn abnormal_curve(
    s: &SRStructure,
    st0: &CodistState,
    steering: &Steering,
    t_end: f64,
    h: f64,
    params: &NumericParams,
) -> Result<AbnormalRun> {
    let m = s.rank();
    let corank = s.corank();
    let tol = params.kernel_tol;

    let basis0 = kernel_basis(s, st0, tol)?;
    if basis0.is_empty() {
        return Err(Error::KernelCollapsed { t: 0.0 });
    }
    let dim0 = basis0.len();

    let times = crate::ode::step_times(0.0, t_end, h);
    let mut positions = vec![st0.q.clone()];
    let mut fibers = vec![st0.k.clone()];
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    let mut prev_dir: Option<DVector<f64>> = None;
    let mut status = AbnormalStatus::Completed;
    let mut iii_residual: f64 = 0.0;
    let mut horizontality: f64 = 0.0;
    let mut min_k = st0.k.norm();

    // Right-hand side at a state, with the steering direction chosen from the
    // step-start direction for all four stages.
    let rhs = |q: &DVector<f64>,
               k: &DVector<f64>,
               dir: &DVector<f64>|
     -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let c = structure_functions(s, q)?;
        let mat = characteristic_matrix(s, &c, k);
        let basis = kernel_of_matrix(&mat, k, tol);
        if basis.is_empty() {
            return Err(Error::KernelCollapsed { t: f64::NAN });
        }
        // Project the reference direction onto the stage kernel.
        let mut w = DVector::zeros(m);
        for b in &basis {
            w += b * b.dot(dir);
        }
        let norm = w.norm();
        if norm < 1e-12 {
            return Err(Error::KernelCollapsed { t: f64::NAN });
        }
        w /= norm;
        let q_dot = s.horizontal_vector(q, &w)?;
        let mut k_dot = DVector::zeros(corank);
        for beta in 0..corank {
            let mut sum = 0.0;
            for (alpha, ka) in k.iter().enumerate() {
                for i in 0..m {
                    sum += ka * c.c(m + alpha, i, m + beta) * w[i];
                }
            }
            k_dot[beta] = sum;
        }
        Ok((q_dot, k_dot, w))
    };

    for pair in times.windows(2) {
        let (t, dt) = (pair[0], pair[1] - pair[0]);
        let q = positions.last().unwrap().clone();
        let k = fibers.last().unwrap().clone();

        // Node bookkeeping: kernel state, steering, residuals.
        let c = structure_functions(s, &q)?;
        let mat = characteristic_matrix(s, &c, &k);
        let basis = kernel_of_matrix(&mat, &k, tol);
        if basis.is_empty() {
            return Err(Error::KernelCollapsed { t });
        }
        if basis.len() != dim0 {
            status = AbnormalStatus::KernelDimensionChanged {
                from: dim0,
                to: basis.len(),
            };
            break;
        }
        let w = steer_direction(steering, &q, &k, &basis, prev_dir.as_ref())
            .map_err(|e| match e {
                Error::KernelCollapsed { .. } => Error::KernelCollapsed { t },
                other => other,
            })?;
        iii_residual = iii_residual.max((&mat * &w).amax());
        let q_dot = s.horizontal_vector(&q, &w)?;
        let coeffs = s.adapted_coefficients(&q, &q_dot)?;
        if corank > 0 {
            horizontality = horizontality.max(coeffs.rows(m, corank).amax());
        }
        dirs.push(w.clone());

        // RK4 step on (q, k) with the direction field projected per stage.
        let step = |q: &DVector<f64>, k: &DVector<f64>| rhs(q, k, &w);
        let (k1q, k1k, _) = step(&q, &k).map_err(|e| at_time(e, t))?;
        let (k2q, k2k, _) = step(&(&q + &k1q * (0.5 * dt)), &(&k + &k1k * (0.5 * dt)))
            .map_err(|e| at_time(e, t))?;
        let (k3q, k3k, _) = step(&(&q + &k2q * (0.5 * dt)), &(&k + &k2k * (0.5 * dt)))
            .map_err(|e| at_time(e, t))?;
        let (k4q, k4k, _) =
            step(&(&q + &k3q * dt), &(&k + &k3k * dt)).map_err(|e| at_time(e, t))?;
        let q_next = &q + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
        let k_next = &k + (k1k + k2k * 2.0 + k3k * 2.0 + k4k) * (dt / 6.0);

        if q_next.norm() > params.blowup {
            return Err(Error::BlowUp {
                t: t + dt,
                norm: q_next.norm(),
            });
        }
        let k_norm = k_next.norm();
        min_k = min_k.min(k_norm);
        if k_norm < 1e-12 {
            return Err(Error::ZeroSection { t: t + dt });
        }
        positions.push(q_next);
        fibers.push(k_next);
        prev_dir = Some(w);
    }

    // Final-node residual when the run completed.
    if status == AbnormalStatus::Completed {
        let q = positions.last().unwrap();
        let k = fibers.last().unwrap();
        let c = structure_functions(s, q)?;
        let mat = characteristic_matrix(s, &c, k);
        let basis = kernel_of_matrix(&mat, k, tol);
        if let Some(prev) = prev_dir.as_ref() {
            if !basis.is_empty() {
                if let Ok(w) = steer_direction(steering, q, k, &basis, Some(prev)) {
                    iii_residual = iii_residual.max((&mat * &w).amax());
                    dirs.push(w);
                }
            }
        }
    }

    let kept = positions.len();
    let mut tr = Trajectory::new(times[..kept].to_vec(), positions);
    tr.fiber = Some(fibers);
    while dirs.len() < tr.len() {
        dirs.push(dirs.last().cloned().unwrap_or_else(|| DVector::zeros(m)));
    }
    dirs.truncate(tr.len());
    tr.controls = Some(dirs);
    tr.diagnostics.set("eq_iii_residual", iii_residual);
    tr.diagnostics.set("horizontality", horizontality);
    tr.diagnostics.set("min_fiber_norm", min_k);
    Ok(AbnormalRun {
        trajectory: tr,
        status,
    })
}

fn at_time(e: Error, t: f64) -> Error {
    match e {
        Error::KernelCollapsed { .. } => Error::KernelCollapsed { t },
        Error::ZeroSection { .. } => Error::ZeroSection { t },
        other => other,
    }
}
