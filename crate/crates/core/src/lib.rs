//! Numerical engine for sub-Riemannian geometry.
//!
//! A sub-Riemannian structure is a distribution `D ⊂ TQ` spanned by frame
//! fields `X_1..X_m` on a chart of `Q = R^n`, a metric `g^D` on `D` given by
//! constant coefficients in that frame, and a rigging `V = span(Y_1..Y_{n-m})`
//! complementary to `D`. On top of that structure this crate computes
//!
//! * normal (shortest) geodesics as projections of the Hamiltonian flow of
//!   `h(q,p) = ½ Σ (g_D^{-1})_{ij} ⟨p, X_i⟩⟨p, X_j⟩` on `T*Q`,
//! * straightest geodesics of the Schouten partial connection determined by
//!   the rigging,
//! * abnormal geodesics as characteristic curves of the annihilator
//!   codistribution, which are metric-independent,
//! * derived flags, growth vectors and graded symbol algebras,
//! * connection, curvature, horizontal lift, Wong (charged-particle) dynamics
//!   and geodesic factorization on principal-bundle (Chaplygin) structures.
//!
//! Frame fields are entered as expression strings over chart variables
//! `q1..qn`; first derivatives are exact via forward-mode dual numbers.
//!
//! Everything is pure and deterministic: the same inputs produce bitwise
//! identical trajectories.

pub mod abnormal;
pub mod chaplygin;
pub mod fieldspec;
pub mod geometry;
pub mod hamiltonian;
pub mod ode;
pub mod scenarios;
pub mod schouten;
pub mod trajectory;

pub use fieldspec::Expr;
pub use geometry::{SRStructure, VectorField};
pub use trajectory::{Diagnostics, Trajectory};

/// Errors shared by all solvers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("evaluation domain error: {0}")]
    Domain(String),
    #[error("adapted frame [X|Y] is singular at {point:?}")]
    SingularFrame { point: Vec<f64> },
    #[error("metric is not positive definite at {point:?}")]
    DegenerateMetric { point: Vec<f64> },
    #[error("trajectory blow-up at t = {t}: |q| = {norm:.3e}")]
    BlowUp { t: f64, norm: f64 },
    #[error("characteristic kernel collapsed to zero at t = {t}")]
    KernelCollapsed { t: f64 },
    #[error("fiber covector reached the zero section at t = {t}")]
    ZeroSection { t: f64 },
    #[error("irregular point: growth vector {at_point:?} becomes {at_perturbed:?} under perturbation")]
    IrregularPoint {
        at_point: Vec<usize>,
        at_perturbed: Vec<usize>,
    },
    #[error("trajectory carries no control record")]
    MissingControls,
    #[error("selected indices do not span a subalgebra (residual {0:.3e})")]
    NotSubalgebra(f64),
    #[error("decomposition is not reductive (residual {0:.3e})")]
    NotReductive(f64),
    #[error("distribution is not bracket generating")]
    NotBracketGenerating,
    #[error("algebra metric is not ad-invariant")]
    NotBiInvariant,
    #[error("unsupported group chart: {0}")]
    UnsupportedGroupChart(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Numeric knobs shared by the solvers. Defaults match the documented
/// tolerances; the CLI exposes them through the config file.
#[derive(Debug, Clone)]
pub struct NumericParams {
    /// Relative singular-value threshold for rank decisions.
    pub rank_tol: f64,
    /// Relative singular-value threshold for characteristic-kernel ranks.
    pub kernel_tol: f64,
    /// Base step for finite differences; scaled by `1 + |q|`.
    pub fd_step: f64,
    /// Trajectory blow-up bound on `|q|`.
    pub blowup: f64,
    /// Radius of the axis perturbations used by regularity checks.
    pub regularity_radius: f64,
    /// Group-element re-projection period (steps) for orthogonal representations.
    pub reproject_every: usize,
    /// Orthogonality-defect trigger for re-projection.
    pub reproject_trigger: f64,
}

impl Default for NumericParams {
    fn default() -> Self {
        NumericParams {
            rank_tol: 1e-9,
            kernel_tol: 1e-8,
            fd_step: 1e-5,
            blowup: 1e6,
            regularity_radius: 1e-4,
            reproject_every: 100,
            reproject_trigger: 1e-9,
        }
    }
}

impl NumericParams {
    /// Finite-difference step at a point, scaled by its magnitude.
    pub fn fd_step_at(&self, q: &nalgebra::DVector<f64>) -> f64 {
        self.fd_step * (1.0 + q.norm())
    }
}
