//! Shared geometric substrate: frame fields, Lie brackets, structure
//! functions, chart metrics and their Riemannian machinery.

pub mod flags;

use nalgebra::{DMatrix, DVector};

use crate::fieldspec::Expr;
use crate::trajectory::Trajectory;
use crate::{Error, NumericParams, Result};

/// A vector field on the chart, one component expression per coordinate.
#[derive(Debug, Clone)]
pub struct VectorField {
    n: usize,
    comps: Vec<Expr>,
}

impl VectorField {
    pub fn new(n: usize, comps: Vec<Expr>) -> Result<Self> {
        if comps.len() != n {
            return Err(Error::Config(format!(
                "vector field needs {n} components, got {}",
                comps.len()
            )));
        }
        for c in &comps {
            if let Some(k) = c.max_var() {
                if k >= n {
                    return Err(Error::Config(format!(
                        "component uses variable q{} beyond chart dimension {n}",
                        k + 1
                    )));
                }
            }
        }
        Ok(VectorField { n, comps })
    }

    /// Parse `n` component strings.
    pub fn parse(n: usize, comps: &[&str]) -> Result<Self> {
        let comps = comps
            .iter()
            .map(|c| Expr::parse(c, n))
            .collect::<Result<Vec<_>>>()?;
        VectorField::new(n, comps)
    }

    /// Coordinate field ∂/∂q_{k+1}.
    pub fn coordinate(n: usize, k: usize) -> Self {
        let comps = (0..n)
            .map(|i| Expr::Const(if i == k { 1.0 } else { 0.0 }))
            .collect();
        VectorField { n, comps }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> &[Expr] {
        &self.comps
    }

    pub fn eval(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.n);
        for (i, c) in self.comps.iter().enumerate() {
            v[i] = c.eval(q.as_slice())?;
        }
        Ok(v)
    }

    /// Value and Jacobian `J[(i,j)] = ∂F^i/∂q_j`, both exact.
    pub fn eval_with_jacobian(&self, q: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut v = DVector::zeros(self.n);
        let mut j = DMatrix::zeros(self.n, self.n);
        for (i, c) in self.comps.iter().enumerate() {
            let (val, grad) = c.eval_with_jet(q.as_slice())?;
            v[i] = val;
            for (col, g) in grad.iter().enumerate() {
                j[(i, col)] = *g;
            }
        }
        Ok((v, j))
    }

    /// Constant-coefficient combination `Σ coeffs[j]·fields[j]`.
    pub fn linear_combination(coeffs: &[f64], fields: &[VectorField]) -> Self {
        let n = fields[0].n;
        let comps = (0..n)
            .map(|i| {
                let exprs: Vec<Expr> = fields.iter().map(|f| f.comps[i].clone()).collect();
                Expr::linear_combination(coeffs, &exprs)
            })
            .collect();
        VectorField { n, comps }
    }
}

/// Lie bracket `[F, G](q) = J_G(q)·F(q) − J_F(q)·G(q)`.
pub fn bracket(f: &VectorField, g: &VectorField, q: &DVector<f64>) -> Result<DVector<f64>> {
    let (fv, fj) = f.eval_with_jacobian(q)?;
    let (gv, gj) = g.eval_with_jacobian(q)?;
    Ok(gj * fv - fj * gv)
}

/// A sub-Riemannian structure in a single chart: horizontal frame `X_1..X_m`
/// spanning the distribution, rigging `Y_1..Y_{n-m}` spanning a complement,
/// and the constant matrix of horizontal metric coefficients in the frame.
#[derive(Debug, Clone)]
pub struct SRStructure {
    n: usize,
    m: usize,
    frame: Vec<VectorField>,
    rigging: Vec<VectorField>,
    g_d: DMatrix<f64>,
    g_d_inv: DMatrix<f64>,
}

impl SRStructure {
    pub fn new(
        frame: Vec<VectorField>,
        rigging: Vec<VectorField>,
        g_d: DMatrix<f64>,
    ) -> Result<Self> {
        let m = frame.len();
        if m == 0 {
            return Err(Error::Config("empty horizontal frame".into()));
        }
        let n = frame[0].dim();
        if frame.len() + rigging.len() != n {
            return Err(Error::Config(format!(
                "frame ({}) + rigging ({}) must span the chart dimension {n}",
                frame.len(),
                rigging.len()
            )));
        }
        for f in frame.iter().chain(rigging.iter()) {
            if f.dim() != n {
                return Err(Error::Config("mixed chart dimensions in frame".into()));
            }
        }
        if g_d.nrows() != m || g_d.ncols() != m {
            return Err(Error::Config(format!("g_D must be {m}×{m}")));
        }
        if (&g_d - g_d.transpose()).amax() > 1e-12 * (1.0 + g_d.amax()) {
            return Err(Error::Config("g_D must be symmetric".into()));
        }
        let chol = g_d
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("g_D must be positive definite".into()))?;
        let g_d_inv = chol.inverse();
        Ok(SRStructure {
            n,
            m,
            frame,
            rigging,
            g_d,
            g_d_inv,
        })
    }

    /// Orthonormal-frame structure from parsed component strings.
    pub fn parse(n: usize, frame: &[&[&str]], rigging: &[&[&str]]) -> Result<Self> {
        let frame = frame
            .iter()
            .map(|c| VectorField::parse(n, c))
            .collect::<Result<Vec<_>>>()?;
        let rigging = rigging
            .iter()
            .map(|c| VectorField::parse(n, c))
            .collect::<Result<Vec<_>>>()?;
        let m = frame.len();
        SRStructure::new(frame, rigging, DMatrix::identity(m, m))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.m
    }

    pub fn corank(&self) -> usize {
        self.n - self.m
    }

    pub fn frame(&self) -> &[VectorField] {
        &self.frame
    }

    pub fn rigging(&self) -> &[VectorField] {
        &self.rigging
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.g_d
    }

    pub fn cometric(&self) -> &DMatrix<f64> {
        &self.g_d_inv
    }

    /// Replace the metric, keeping the frames. Used by metric-independence
    /// checks of the abnormal solver.
    pub fn with_metric(&self, g_d: DMatrix<f64>) -> Result<Self> {
        SRStructure::new(self.frame.clone(), self.rigging.clone(), g_d)
    }

    /// Replace the rigging, keeping frame and metric.
    pub fn with_rigging(&self, rigging: Vec<VectorField>) -> Result<Self> {
        SRStructure::new(self.frame.clone(), rigging, self.g_d.clone())
    }

    /// The adapted frame matrix `E(q) = [X_1 … X_m | Y_1 … Y_{n−m}]` columns.
    pub fn adapted_matrix(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut e = DMatrix::zeros(self.n, self.n);
        for (col, f) in self.frame.iter().chain(self.rigging.iter()).enumerate() {
            e.set_column(col, &f.eval(q)?);
        }
        Ok(e)
    }

    /// Solve `E(q)·c = v`: coefficients of a chart vector in the adapted frame.
    pub fn adapted_coefficients(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let e = self.adapted_matrix(q)?;
        let lu = e.lu();
        lu.solve(v).ok_or_else(|| Error::SingularFrame {
            point: q.as_slice().to_vec(),
        })
    }

    /// Condition number of the adapted frame (2-norm).
    pub fn frame_condition(&self, q: &DVector<f64>) -> Result<f64> {
        let e = self.adapted_matrix(q)?;
        let sv = e.svd(false, false).singular_values;
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            return Err(Error::SingularFrame {
                point: q.as_slice().to_vec(),
            });
        }
        Ok(max / min)
    }

    /// Horizontal vector from frame coefficients: `Σ u^i X_i(q)`.
    pub fn horizontal_vector(&self, q: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.n);
        for (i, x) in self.frame.iter().enumerate() {
            v += x.eval(q)? * u[i];
        }
        Ok(v)
    }

    /// Cholesky re-framing to an orthonormal horizontal frame: returns the
    /// structure with `g_D = I` spanning the same distribution with the same
    /// metric, together with the factor `L` (`g_D = L·Lᵀ`). Coefficients map
    /// by `ũ = Lᵀ·u`.
    pub fn orthonormalized(&self) -> (SRStructure, DMatrix<f64>) {
        let chol = self.g_d.clone().cholesky().expect("validated SPD");
        let l = chol.l();
        let l_inv_t = l
            .clone()
            .try_inverse()
            .expect("Cholesky factor invertible")
            .transpose();
        // X̃_i = Σ_j (L^{-T})_{ji} X_j  ⇒ g(X̃_i, X̃_j) = (L^{-1} g_D L^{-T})_{ij} = δ_ij.
        let new_frame: Vec<VectorField> = (0..self.m)
            .map(|i| {
                let coeffs: Vec<f64> = (0..self.m).map(|j| l_inv_t[(j, i)]).collect();
                VectorField::linear_combination(&coeffs, &self.frame)
            })
            .collect();
        let s = SRStructure::new(new_frame, self.rigging.clone(), DMatrix::identity(self.m, self.m))
            .expect("re-framed structure is valid");
        (s, l)
    }

    /// Frame invertibility over a sample grid; returns the worst condition
    /// number observed.
    pub fn validate_on_grid(&self, points: &[DVector<f64>]) -> Result<f64> {
        let mut worst: f64 = 1.0;
        for q in points {
            worst = worst.max(self.frame_condition(q)?);
        }
        Ok(worst)
    }
}

/// Structure functions `c^a_{bc}` of the adapted frame `(e_1..e_n) =
/// (X_1..X_m, Y_1..Y_{n−m})` at a point: `[e_b, e_c](q) = c^a_{bc} e_a(q)`.
#[derive(Debug, Clone)]
pub struct StructureCoeffs {
    pub n: usize,
    pub m: usize,
    data: Vec<f64>,
}

impl StructureCoeffs {
    /// `c^a_{bc}` with 0-based adapted-frame indices.
    pub fn c(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.n + b) * self.n + c]
    }
}

/// Compute all structure functions at `q` by solving the adapted frame.
pub fn structure_functions(s: &SRStructure, q: &DVector<f64>) -> Result<StructureCoeffs> {
    let n = s.dim();
    let e = s.adapted_matrix(q)?;
    let lu = e.lu();
    let fields: Vec<&VectorField> = s.frame().iter().chain(s.rigging().iter()).collect();
    let mut data = vec![0.0; n * n * n];
    for b in 0..n {
        for c in (b + 1)..n {
            let br = bracket(fields[b], fields[c], q)?;
            let coeffs = lu.solve(&br).ok_or_else(|| Error::SingularFrame {
                point: q.as_slice().to_vec(),
            })?;
            for a in 0..n {
                data[(a * n + b) * n + c] = coeffs[a];
                data[(a * n + c) * n + b] = -coeffs[a];
            }
        }
    }
    Ok(StructureCoeffs { n, m: s.rank(), data })
}

/// Point evaluator of a metric field.
pub type MetricFn = dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync;

/// A chart metric field `q ↦ g(q)` (n×n symmetric positive definite).
pub struct ChartMetric {
    n: usize,
    f: Box<MetricFn>,
}

impl ChartMetric {
    pub fn new(n: usize, f: Box<MetricFn>) -> Self {
        ChartMetric { n, f }
    }

    pub fn constant(g: DMatrix<f64>) -> Self {
        let n = g.nrows();
        ChartMetric::new(n, Box::new(move |_| Ok(g.clone())))
    }

    /// Metric from an expression matrix (validated symmetric on evaluation).
    pub fn from_exprs(n: usize, entries: Vec<Vec<Expr>>) -> Result<Self> {
        if entries.len() != n || entries.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("metric expression matrix must be {n}×{n}")));
        }
        Ok(ChartMetric::new(
            n,
            Box::new(move |q| {
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        g[(i, j)] = entries[i][j].eval(q.as_slice())?;
                    }
                }
                Ok(g)
            }),
        ))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eval(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        (self.f)(q)
    }

    /// `g(q)` inverse, or a degenerate-metric error.
    pub fn eval_inverse(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let g = self.eval(q)?;
        g.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::DegenerateMetric {
                point: q.as_slice().to_vec(),
            })
    }
}

/// Chart metric that declares the adapted frame orthogonal: `g = E^{-T} ·
/// blockdiag(g_D, I) · E^{-1}`. The rigging becomes the orthogonal
/// complement of the distribution and `g|_D` coincides with `g_D`.
pub fn metric_extension(s: &SRStructure) -> ChartMetric {
    let s = s.clone();
    let n = s.dim();
    let m = s.rank();
    ChartMetric::new(
        n,
        Box::new(move |q| {
            let e = s.adapted_matrix(q)?;
            let e_inv = e.try_inverse().ok_or_else(|| Error::SingularFrame {
                point: q.as_slice().to_vec(),
            })?;
            let mut block = DMatrix::identity(n, n);
            block.view_mut((0, 0), (m, m)).copy_from(s.metric());
            Ok(e_inv.transpose() * block * e_inv)
        }),
    )
}

/// Christoffel symbols `Γ^i_{jk}` of a chart metric at a point; symmetric in
/// the lower indices. `Γ^i_{jk}` is stored at `[i][j][k]`.
#[derive(Debug, Clone)]
pub struct Christoffels {
    pub n: usize,
    data: Vec<f64>,
}

impl Christoffels {
    pub fn gamma(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    /// Contraction `−Γ^i_{jk} v^j v^k`, the geodesic acceleration.
    pub fn acceleration(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut acc = DVector::zeros(n);
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                for k in 0..n {
                    sum += self.gamma(i, j, k) * v[j] * v[k];
                }
            }
            acc[i] = -sum;
        }
        acc
    }
}

/// Levi-Civita Christoffel symbols by central finite differences of the
/// metric field: `Γ^i_{jk} = ½ g^{il}(∂_j g_{lk} + ∂_k g_{lj} − ∂_l g_{jk})`.
pub fn levi_civita_christoffels(
    g: &ChartMetric,
    q: &DVector<f64>,
    params: &NumericParams,
) -> Result<Christoffels> {
    let n = g.dim();
    let g_inv = g.eval_inverse(q)?;
    let h = params.fd_step_at(q);
    let mut dg = Vec::with_capacity(n); // dg[l] = ∂_l g
    for l in 0..n {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[l] += h;
        qm[l] -= h;
        dg.push((g.eval(&qp)? - g.eval(&qm)?) / (2.0 * h));
    }
    let mut data = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in j..n {
                let mut sum = 0.0;
                for l in 0..n {
                    sum += g_inv[(i, l)] * (dg[j][(l, k)] + dg[k][(l, j)] - dg[l][(j, k)]);
                }
                let v = 0.5 * sum;
                data[(i * n + j) * n + k] = v;
                data[(i * n + k) * n + j] = v;
            }
        }
    }
    Ok(Christoffels { n, data })
}

/// Riemannian geodesic `q̈^i + Γ^i_{jk} q̇^j q̇^k = 0` by RK4.
/// Records the relative drift of the squared speed `g(q̇, q̇)`.
pub fn riemannian_geodesic(
    g: &ChartMetric,
    q0: &DVector<f64>,
    v0: &DVector<f64>,
    t_end: f64,
    h: f64,
    params: &NumericParams,
) -> Result<Trajectory> {
    let n = g.dim();
    let y0 = stack(q0, v0);
    let blowup = params.blowup;
    let f = |_t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let q = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        let gamma = levi_civita_christoffels(g, &q, params)?;
        Ok(stack(&v, &gamma.acceleration(&v)))
    };
    let guard = |t: f64, y: &DVector<f64>| -> Result<()> {
        let norm = y.rows(0, n).norm();
        if norm > blowup {
            return Err(Error::BlowUp { t, norm });
        }
        Ok(())
    };
    let (times, ys) = crate::ode::rk4(f, y0, 0.0, t_end, h, guard)?;
    let positions: Vec<DVector<f64>> = ys.iter().map(|y| y.rows(0, n).into_owned()).collect();
    let velocities: Vec<DVector<f64>> = ys.iter().map(|y| y.rows(n, n).into_owned()).collect();
    let mut speed0 = 0.0;
    let mut drift: f64 = 0.0;
    for (k, (q, v)) in positions.iter().zip(&velocities).enumerate() {
        let s = (v.transpose() * g.eval(q)? * v)[(0, 0)];
        if k == 0 {
            speed0 = s;
        } else {
            drift = drift.max((s - speed0).abs());
        }
    }
    let mut tr = Trajectory::new(times, positions);
    tr.velocities = Some(velocities);
    tr.diagnostics
        .set("speed_drift_rel", drift / speed0.abs().max(1e-300));
    Ok(tr)
}

pub(crate) fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.len() + b.len());
    y.rows_mut(0, a.len()).copy_from(a);
    y.rows_mut(a.len(), b.len()).copy_from(b);
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn heisenberg() -> SRStructure {
        SRStructure::parse(
            3,
            &[&["1", "0", "-q2/2"], &["0", "1", "q1/2"]],
            &[&["0", "0", "1"]],
        )
        .unwrap()
    }

    fn martinet() -> SRStructure {
        SRStructure::parse(
            3,
            &[&["1", "0", "q2^2/2"], &["0", "1", "0"]],
            &[&["0", "0", "1"]],
        )
        .unwrap()
    }

    #[test]
    fn coordinate_fields_commute() {
        let f = VectorField::coordinate(3, 0);
        let g = VectorField::coordinate(3, 1);
        let q = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        assert_eq!(bracket(&f, &g, &q).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn heisenberg_bracket_is_vertical_unit() {
        let s = heisenberg();
        for q in [
            DVector::from_vec(vec![0.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.3, -0.7, 0.4]),
        ] {
            let br = bracket(&s.frame()[0], &s.frame()[1], &q).unwrap();
            assert_abs_diff_eq!(br[0], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(br[1], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(br[2], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn bracket_antisymmetry_on_random_points() {
        let s = heisenberg();
        for k in 0..50 {
            let q = DVector::from_vec(vec![
                (k as f64 * 0.73).sin(),
                (k as f64 * 1.31).cos(),
                k as f64 * 0.01 - 0.2,
            ]);
            let ab = bracket(&s.frame()[0], &s.frame()[1], &q).unwrap();
            let ba = bracket(&s.frame()[1], &s.frame()[0], &q).unwrap();
            assert!((ab + ba).amax() < 1e-14);
        }
    }

    #[test]
    fn structure_functions_flat_frame_vanish() {
        let s = SRStructure::parse(3, &[&["1", "0", "0"], &["0", "1", "0"]], &[&["0", "0", "1"]])
            .unwrap();
        let c = structure_functions(&s, &DVector::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                for cc in 0..3 {
                    assert_eq!(c.c(a, b, cc), 0.0);
                }
            }
        }
    }

    #[test]
    fn structure_functions_heisenberg() {
        let s = heisenberg();
        let q = DVector::from_vec(vec![0.4, -0.9, 0.1]);
        let c = structure_functions(&s, &q).unwrap();
        // Only c^z_{12} = 1 = -c^z_{21} among independent entries.
        for a in 0..3 {
            for b in 0..3 {
                for cc in 0..3 {
                    let expect = if a == 2 && b == 0 && cc == 1 {
                        1.0
                    } else if a == 2 && b == 1 && cc == 0 {
                        -1.0
                    } else {
                        0.0
                    };
                    assert_abs_diff_eq!(c.c(a, b, cc), expect, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn structure_functions_martinet_sign() {
        let s = martinet();
        let q = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let c = structure_functions(&s, &q).unwrap();
        // [X1, X2] = −y ∂z, so c^z_{12}(0,1,0) = −1 in this solver's convention.
        assert_abs_diff_eq!(c.c(2, 0, 1), -1.0, epsilon = 1e-13);
    }

    #[test]
    fn structure_functions_reconstruct_bracket() {
        let s = heisenberg();
        let q = DVector::from_vec(vec![0.2, 0.5, -0.3]);
        let c = structure_functions(&s, &q).unwrap();
        let e = s.adapted_matrix(&q).unwrap();
        let fields: Vec<&VectorField> = s.frame().iter().chain(s.rigging().iter()).collect();
        for b in 0..3 {
            for cc in 0..3 {
                let br = bracket(fields[b], fields[cc], &q).unwrap();
                let mut recon = DVector::zeros(3);
                for a in 0..3 {
                    recon += e.column(a) * c.c(a, b, cc);
                }
                assert!((br - recon).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn metric_extension_identity_for_coordinate_frame() {
        let s = SRStructure::parse(3, &[&["1", "0", "0"], &["0", "1", "0"]], &[&["0", "0", "1"]])
            .unwrap();
        let g = metric_extension(&s);
        let q = DVector::from_vec(vec![0.5, -0.5, 0.25]);
        assert!((g.eval(&q).unwrap() - DMatrix::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn metric_extension_makes_frame_unit_and_rigging_orthogonal() {
        let s = heisenberg();
        let g = metric_extension(&s);
        for k in 0..50 {
            let q = DVector::from_vec(vec![
                (k as f64 * 0.37).sin() * 2.0,
                (k as f64 * 0.61).cos() * 2.0,
                k as f64 * 0.05,
            ]);
            let gm = g.eval(&q).unwrap();
            let x1 = s.frame()[0].eval(&q).unwrap();
            let y = s.rigging()[0].eval(&q).unwrap();
            let xx = (x1.transpose() * &gm * &x1)[(0, 0)];
            let xy = (x1.transpose() * &gm * &y)[(0, 0)];
            assert_abs_diff_eq!(xx, 1.0, epsilon = 1e-10);
            assert!(xy.abs() < 1e-10);
        }
    }

    #[test]
    fn christoffels_flat_and_diagonal_oracle() {
        let flat = ChartMetric::constant(DMatrix::identity(2, 2));
        let q = DVector::from_vec(vec![1.0, 2.0]);
        let gamma = levi_civita_christoffels(&flat, &q, &NumericParams::default()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert!(gamma.gamma(i, j, k).abs() < 1e-12);
                }
            }
        }
        // g = diag(1, q1²): Γ^2_{12} = 1/q1, Γ^1_{22} = −q1 (hand differentiation).
        let g = ChartMetric::from_exprs(
            2,
            vec![
                vec![Expr::parse("1", 2).unwrap(), Expr::parse("0", 2).unwrap()],
                vec![Expr::parse("0", 2).unwrap(), Expr::parse("q1^2", 2).unwrap()],
            ],
        )
        .unwrap();
        let gamma = levi_civita_christoffels(&g, &q, &NumericParams::default()).unwrap();
        assert_abs_diff_eq!(gamma.gamma(1, 0, 1), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(gamma.gamma(0, 1, 1), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn metric_compatibility_residual() {
        // ∂_k g_ij − Γ^l_{ki} g_lj − Γ^l_{kj} g_il ≈ 0 for the extension metric.
        let s = heisenberg();
        let g = metric_extension(&s);
        let params = NumericParams::default();
        for seed in 0..5 {
            let q = DVector::from_vec(vec![
                (seed as f64).sin(),
                (seed as f64 * 1.7).cos(),
                seed as f64 * 0.1,
            ]);
            let gamma = levi_civita_christoffels(&g, &q, &params).unwrap();
            let h = params.fd_step_at(&q);
            for k in 0..3 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let dg = (g.eval(&qp).unwrap() - g.eval(&qm).unwrap()) / (2.0 * h);
                let gq = g.eval(&q).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        let mut r = dg[(i, j)];
                        for l in 0..3 {
                            r -= gamma.gamma(l, k, i) * gq[(l, j)]
                                + gamma.gamma(l, k, j) * gq[(i, l)];
                        }
                        assert!(r.abs() < 1e-6, "residual {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn flat_geodesic_is_straight() {
        let g = ChartMetric::constant(DMatrix::identity(2, 2));
        let tr = riemannian_geodesic(
            &g,
            &DVector::zeros(2),
            &DVector::from_vec(vec![1.0, 0.0]),
            1.0,
            1e-2,
            &NumericParams::default(),
        )
        .unwrap();
        let last = tr.positions.last().unwrap();
        assert_abs_diff_eq!(last[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(last[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sphere_geodesics_are_great_circles() {
        // Unit sphere in the stereographic chart: g = 4/(1+|x|²)² I.
        let e = |s: &str| Expr::parse(s, 2).unwrap();
        let g = ChartMetric::from_exprs(
            2,
            vec![
                vec![e("4/(1+q1^2+q2^2)^2"), e("0")],
                vec![e("0"), e("4/(1+q1^2+q2^2)^2")],
            ],
        )
        .unwrap();
        let to_sphere = |x: &DVector<f64>| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            DVector::from_vec(vec![
                2.0 * x[0] / (1.0 + r2),
                2.0 * x[1] / (1.0 + r2),
                (r2 - 1.0) / (1.0 + r2),
            ])
        };
        // Equator start, unit chart speed = unit sphere speed at |x| = 1.
        let q0 = DVector::from_vec(vec![1.0, 0.0]);
        let v0 = DVector::from_vec(vec![0.0, 1.0]);
        let t_end = 2.0 * std::f64::consts::PI;
        let tr = riemannian_geodesic(&g, &q0, &v0, t_end, 1e-3, &NumericParams::default()).unwrap();
        // Closes onto itself after one period.
        let back = tr.positions.last().unwrap();
        assert!((back - &q0).norm() < 1e-4);
        // Sphere-space oracle: P(t)·P(0) = cos t.
        let p0 = to_sphere(&q0);
        for (t, x) in tr.times.iter().zip(&tr.positions).step_by(500) {
            let dot = to_sphere(x).dot(&p0);
            assert!((dot - t.cos()).abs() < 1e-5, "t={t} dot={dot}");
        }
        assert!(tr.diagnostics.get("speed_drift_rel").unwrap() < 1e-8);
    }

    #[test]
    fn orthonormalization_preserves_distribution_metric() {
        // Non-identity g_D: X1 = ∂x, X2 = ∂x + ∂y with g = [[1,1],[1,2]] is the
        // standard Euclidean metric written in a skew frame.
        let fields = vec![
            VectorField::parse(2, &["1", "0"]).unwrap(),
            VectorField::parse(2, &["1", "1"]).unwrap(),
        ];
        let g_d = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        let s = SRStructure::new(fields, vec![], g_d).unwrap();
        let (ortho, l) = s.orthonormalized();
        let q = DVector::zeros(2);
        // New frame must be orthonormal for the *same* metric, i.e. the plain
        // Euclidean metric here.
        let e = ortho.adapted_matrix(&q).unwrap();
        assert!((e.transpose() * &e - DMatrix::identity(2, 2)).amax() < 1e-12);
        // Coefficient map: u in old frame and Lᵀu in new frame give the same vector.
        let u = DVector::from_vec(vec![0.3, -1.1]);
        let v_old = s.horizontal_vector(&q, &u).unwrap();
        let v_new = ortho
            .horizontal_vector(&q, &(l.transpose() * &u))
            .unwrap();
        assert!((v_old - v_new).amax() < 1e-12);
    }
}
