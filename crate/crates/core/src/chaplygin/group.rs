//! Matrix Lie groups for bundle fibers: basis validation, structure
//! constants, exponentials and coefficient maps.
//!
//! Real representations only. Compact groups come as orthogonal
//! representations (rotations as 3×3 matrices, unit quaternions as their
//! 4×4 left-multiplication matrices, which realizes the spin basis
//! `[e_1, e_2] = e_3` over the reals); vector groups `R^k` come as
//! `(k+1)×(k+1)` unipotent matrices so the same machinery applies and the
//! exponential is exact.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Chart support of a group: vector groups expose global coordinates used by
/// the chart-based solvers; other groups have no chart here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupChart {
    /// `R^k` as unipotent matrices; coordinate `z_α` sits at entry `(α, k)`.
    Vector { k: usize },
    None,
}

/// A matrix Lie group presented by a basis of its algebra and a Euclidean
/// metric on the algebra in that basis.
#[derive(Debug, Clone)]
pub struct MatrixLieGroup {
    /// Matrix size of the representation.
    pub d: usize,
    /// Algebra dimension.
    pub dim: usize,
    pub basis: Vec<DMatrix<f64>>,
    /// `[e_b, e_c] = c^a_{bc} e_a`, flattened `a`-major.
    structure: Vec<f64>,
    pub g_alg: DMatrix<f64>,
    pub is_ad_invariant: bool,
    /// All basis matrices antisymmetric: group elements stay orthogonal and
    /// polar re-projection is meaningful.
    pub orthogonal_rep: bool,
    pub chart: GroupChart,
    /// Least-squares decomposition onto the basis: `coeffs = pinv · vec(M)`.
    basis_pinv: DMatrix<f64>,
}

impl MatrixLieGroup {
    pub fn new(basis: Vec<DMatrix<f64>>, g_alg: DMatrix<f64>) -> Result<Self> {
        Self::with_chart(basis, g_alg, GroupChart::None)
    }

    fn with_chart(
        basis: Vec<DMatrix<f64>>,
        g_alg: DMatrix<f64>,
        chart: GroupChart,
    ) -> Result<Self> {
        let dim = basis.len();
        if dim == 0 {
            return Err(Error::Config("empty algebra basis".into()));
        }
        let d = basis[0].nrows();
        if basis.iter().any(|b| b.nrows() != d || b.ncols() != d) {
            return Err(Error::Config("algebra basis matrices must share one size".into()));
        }
        if g_alg.nrows() != dim || g_alg.ncols() != dim {
            return Err(Error::Config(format!("algebra metric must be {dim}×{dim}")));
        }
        if g_alg.clone().cholesky().is_none() {
            return Err(Error::Config("algebra metric must be positive definite".into()));
        }
        // Flattened basis and its pseudo-inverse.
        let mut b = DMatrix::zeros(d * d, dim);
        for (col, e) in basis.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    b[(i * d + j, col)] = e[(i, j)];
                }
            }
        }
        let bt = b.transpose();
        let gram = &bt * &b;
        let gram_inv = gram.try_inverse().ok_or_else(|| {
            Error::Config("algebra basis is linearly dependent".into())
        })?;
        let basis_pinv = gram_inv * bt;

        let mut g = MatrixLieGroup {
            d,
            dim,
            basis,
            structure: vec![0.0; dim * dim * dim],
            g_alg,
            is_ad_invariant: false,
            orthogonal_rep: false,
            chart,
            basis_pinv,
        };

        // Structure constants with a closure check.
        let scale = g.basis.iter().map(|e| e.amax()).fold(0.0, f64::max);
        for b_idx in 0..dim {
            for c_idx in (b_idx + 1)..dim {
                let comm = &g.basis[b_idx] * &g.basis[c_idx] - &g.basis[c_idx] * &g.basis[b_idx];
                let (coeffs, residual) = g.decompose(&comm);
                if residual > 1e-12 * scale.max(1.0) {
                    return Err(Error::NotSubalgebra(residual));
                }
                for a in 0..dim {
                    g.structure[(a * dim + b_idx) * dim + c_idx] = coeffs[a];
                    g.structure[(a * dim + c_idx) * dim + b_idx] = -coeffs[a];
                }
            }
        }

        // Jacobi identity of the computed constants.
        let mut jacobi: f64 = 0.0;
        for a in 0..dim {
            for b_idx in 0..dim {
                for c_idx in 0..dim {
                    for e in 0..dim {
                        let mut sum = 0.0;
                        for f in 0..dim {
                            sum += g.c(f, b_idx, c_idx) * g.c(a, f, e)
                                + g.c(f, c_idx, e) * g.c(a, f, b_idx)
                                + g.c(f, e, b_idx) * g.c(a, f, c_idx);
                        }
                        jacobi = jacobi.max(sum.abs());
                    }
                }
            }
        }
        if jacobi > 1e-12 * (1.0 + scale * scale) {
            return Err(Error::Config(format!("Jacobi identity residual {jacobi:.3e}")));
        }

        // Ad-invariance of the algebra metric: g([a,b],c) + g(b,[a,c]) = 0.
        let mut ad_res: f64 = 0.0;
        for a in 0..dim {
            for b_idx in 0..dim {
                for c_idx in 0..dim {
                    let mut sum = 0.0;
                    for f in 0..dim {
                        sum += g.c(f, a, b_idx) * g.g_alg[(f, c_idx)]
                            + g.c(f, a, c_idx) * g.g_alg[(b_idx, f)];
                    }
                    ad_res = ad_res.max(sum.abs());
                }
            }
        }
        g.is_ad_invariant = ad_res <= 1e-10 * (1.0 + g.g_alg.amax());

        g.orthogonal_rep = g
            .basis
            .iter()
            .all(|e| (e.transpose() + e).amax() < 1e-14 * scale.max(1.0));
        Ok(g)
    }

    /// The vector group `R^k` with a given algebra metric.
    pub fn vector_group(k: usize, g_alg: DMatrix<f64>) -> Result<Self> {
        let mut basis = Vec::with_capacity(k);
        for alpha in 0..k {
            let mut e = DMatrix::zeros(k + 1, k + 1);
            e[(alpha, k)] = 1.0;
            basis.push(e);
        }
        Self::with_chart(basis, g_alg, GroupChart::Vector { k })
    }

    /// Rotations of `R³`; basis `[e_1, e_2] = e_3` cyclic, metric `g_alg`.
    pub fn so3(g_alg: DMatrix<f64>) -> Result<Self> {
        let l1 = DMatrix::from_row_slice(3, 3, &[0., 0., 0., 0., 0., -1., 0., 1., 0.]);
        let l2 = DMatrix::from_row_slice(3, 3, &[0., 0., 1., 0., 0., 0., -1., 0., 0.]);
        let l3 = DMatrix::from_row_slice(3, 3, &[0., -1., 0., 1., 0., 0., 0., 0., 0.]);
        Self::new(vec![l1, l2, l3], g_alg)
    }

    /// Unit quaternions (the 2-sphere double cover group) as real 4×4
    /// left-multiplication matrices; spin basis with `[e_1, e_2] = e_3`.
    pub fn su2(g_alg: DMatrix<f64>) -> Result<Self> {
        #[rustfmt::skip]
        let li = DMatrix::from_row_slice(4, 4, &[
            0., -1., 0., 0.,
            1., 0., 0., 0.,
            0., 0., 0., -1.,
            0., 0., 1., 0.,
        ]);
        #[rustfmt::skip]
        let lj = DMatrix::from_row_slice(4, 4, &[
            0., 0., -1., 0.,
            0., 0., 0., 1.,
            1., 0., 0., 0.,
            0., -1., 0., 0.,
        ]);
        #[rustfmt::skip]
        let lk = DMatrix::from_row_slice(4, 4, &[
            0., 0., 0., -1.,
            0., 0., -1., 0.,
            0., 1., 0., 0.,
            1., 0., 0., 0.,
        ]);
        Self::new(vec![li * 0.5, lj * 0.5, lk * 0.5], g_alg)
    }

    /// Structure constant `c^a_{bc}`.
    pub fn c(&self, a: usize, b: usize, c: usize) -> f64 {
        self.structure[(a * self.dim + b) * self.dim + c]
    }

    pub fn identity(&self) -> DMatrix<f64> {
        DMatrix::identity(self.d, self.d)
    }

    /// Algebra element from basis coefficients.
    pub fn from_coeffs(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d, self.d);
        for (e, c) in self.basis.iter().zip(v.iter()) {
            m += e * *c;
        }
        m
    }

    fn decompose(&self, m: &DMatrix<f64>) -> (DVector<f64>, f64) {
        let mut flat = DVector::zeros(self.d * self.d);
        for i in 0..self.d {
            for j in 0..self.d {
                flat[i * self.d + j] = m[(i, j)];
            }
        }
        let coeffs = &self.basis_pinv * flat;
        let residual = (m - self.from_coeffs(&coeffs)).amax();
        (coeffs, residual)
    }

    /// Basis coefficients of an algebra element; errors if `m` leaves the
    /// span of the basis.
    pub fn to_coeffs(&self, m: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (coeffs, residual) = self.decompose(m);
        if residual > 1e-8 * (1.0 + m.amax()) {
            return Err(Error::Precondition(format!(
                "matrix leaves the algebra span (residual {residual:.3e})"
            )));
        }
        Ok(coeffs)
    }

    /// `Ad_g(ξ) = g ξ g^{-1}`.
    pub fn ad(&self, g: &DMatrix<f64>, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let g_inv = g.clone().try_inverse().ok_or_else(|| {
            Error::Precondition("singular group element".into())
        })?;
        Ok(g * xi * g_inv)
    }

    /// Group exponential of basis coefficients.
    pub fn exp_coeffs(&self, v: &DVector<f64>) -> DMatrix<f64> {
        crate::ode::expm(&self.from_coeffs(v))
    }

    /// Chart coordinates of a vector-group element.
    pub fn vector_chart_coords(&self, g: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self.chart {
            GroupChart::Vector { k } => {
                let mut z = DVector::zeros(k);
                for alpha in 0..k {
                    z[alpha] = g[(alpha, k)];
                }
                Ok(z)
            }
            GroupChart::None => Err(Error::UnsupportedGroupChart(
                "group has no global chart".into(),
            )),
        }
    }
}
