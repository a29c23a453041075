//! Preconditioners, regularizers and the weighted proximal operator
//!
//! `Prox_{B,γg}(s) = argmin_{s'} γ g(s') + ½ (s' − s)ᵀ B (s' − s)`
//!
//! For the ellipsoid indicator g = χ_K, K = {s : sᵀΩs ≤ r}, the operator is
//! the B-weighted projection onto K. When B is a multiple of Ω this is a
//! radial rescaling. Otherwise the KKT condition `B(s − s') = λΩs'` is solved
//! for the multiplier λ ≥ 0 through the generalized eigenbasis of (B, Ω),
//! which turns the constraint into a scalar secular equation.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

const SPD_REL_TOL: f64 = 1e-10;

/// A validated symmetric positive definite matrix with its factorizations.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: Matrix,
    cholesky: Cholesky<f64, Dyn>,
    inverse: Matrix,
    eig_min: f64,
    eig_max: f64,
}

impl SpdMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let q = matrix.nrows();
        if q == 0 || matrix.ncols() != q {
            return Err(Error::NotSpd(format!(
                "expected a non-empty square matrix, got {}x{}",
                q,
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotSpd("non-finite entry".into()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SPD_REL_TOL * scale {
            return Err(Error::NotSpd(format!("asymmetry {asym:e}")));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let eig_min = eig.eigenvalues.min();
        let eig_max = eig.eigenvalues.max();
        if eig_min <= 0.0 {
            return Err(Error::NotSpd(format!("smallest eigenvalue {eig_min:e}")));
        }
        let cholesky = Cholesky::new(sym.clone())
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        let inverse = cholesky.inverse();
        let id_err = (&sym * &inverse - Matrix::identity(q, q)).amax();
        if id_err > SPD_REL_TOL * (eig_max / eig_min).max(1.0) {
            return Err(Error::NotSpd(format!(
                "ill-conditioned: |M M^-1 - I| = {id_err:e}"
            )));
        }
        Ok(Self {
            matrix: sym,
            cholesky,
            inverse,
            eig_min,
            eig_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.cholesky
    }

    pub fn eig_min(&self) -> f64 {
        self.eig_min
    }

    pub fn eig_max(&self) -> f64 {
        self.eig_max
    }

    /// vᵀ M v
    pub fn quad_form(&self, v: &Vector) -> f64 {
        v.dot(&(&self.matrix * v))
    }
}

pub type PrecondFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;

#[derive(Clone)]
enum PrecondKind {
    Identity(usize),
    Constant(SpdMatrix),
    Callback { dim: usize, eval: PrecondFn },
}

/// The state-dependent preconditioner s ↦ B(s) with spectral bounds
/// `v_min ≤ λ(B(s)) ≤ v_max`.
#[derive(Clone)]
pub struct Preconditioner {
    kind: PrecondKind,
    v_min: f64,
    v_max: f64,
}

impl fmt::Debug for Preconditioner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            PrecondKind::Identity(q) => format!("Identity({q})"),
            PrecondKind::Constant(m) => format!("Constant({0}x{0})", m.dim()),
            PrecondKind::Callback { dim, .. } => format!("Callback({dim})"),
        };
        f.debug_struct("Preconditioner")
            .field("kind", &kind)
            .field("v_min", &self.v_min)
            .field("v_max", &self.v_max)
            .finish()
    }
}

fn check_bounds(v_min: f64, v_max: f64) -> Result<()> {
    if !(v_min > 0.0 && v_min <= v_max && v_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spectral bounds must satisfy 0 < v_min <= v_max, got [{v_min}, {v_max}]"
        )));
    }
    Ok(())
}

impl Preconditioner {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: PrecondKind::Identity(dim),
            v_min: 1.0,
            v_max: 1.0,
        }
    }

    /// Constant preconditioner, bounds taken from its spectrum.
    pub fn constant(matrix: Matrix) -> Result<Self> {
        let spd = SpdMatrix::new(matrix)?;
        let (v_min, v_max) = (spd.eig_min(), spd.eig_max());
        Ok(Self {
            kind: PrecondKind::Constant(spd),
            v_min,
            v_max,
        })
    }

    /// Constant preconditioner with caller-declared bounds, which must contain
    /// the spectrum.
    pub fn constant_with_bounds(matrix: Matrix, v_min: f64, v_max: f64) -> Result<Self> {
        check_bounds(v_min, v_max)?;
        let spd = SpdMatrix::new(matrix)?;
        let slack = SPD_REL_TOL * v_max;
        if spd.eig_min() < v_min - slack || spd.eig_max() > v_max + slack {
            return Err(Error::InvalidArgument(format!(
                "spectrum [{:e}, {:e}] not inside declared bounds [{v_min:e}, {v_max:e}]",
                spd.eig_min(),
                spd.eig_max()
            )));
        }
        Ok(Self {
            kind: PrecondKind::Constant(spd),
            v_min,
            v_max,
        })
    }

    /// State-dependent preconditioner. The callback must return SPD matrices
    /// with spectrum in `[v_min, v_max]`; this is not re-checked per call.
    pub fn callback(dim: usize, v_min: f64, v_max: f64, eval: PrecondFn) -> Result<Self> {
        check_bounds(v_min, v_max)?;
        Ok(Self {
            kind: PrecondKind::Callback { dim, eval },
            v_min,
            v_max,
        })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            PrecondKind::Identity(q) => *q,
            PrecondKind::Constant(m) => m.dim(),
            PrecondKind::Callback { dim, .. } => *dim,
        }
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// B(s).
    pub fn at(&self, s: &Vector) -> Cow<'_, Matrix> {
        match &self.kind {
            PrecondKind::Identity(q) => Cow::Owned(Matrix::identity(*q, *q)),
            PrecondKind::Constant(m) => Cow::Borrowed(m.matrix()),
            PrecondKind::Callback { eval, .. } => Cow::Owned(eval(s)),
        }
    }
}

/// Tolerances of the ellipsoid-projection root finder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootFinding {
    /// Stop when |sᵀΩs − r| ≤ rel_tol·r.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for RootFinding {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_iter: 200,
        }
    }
}

/// K = {s : sᵀΩs ≤ r}.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    omega: SpdMatrix,
    radius: f64,
    root: RootFinding,
}

impl Ellipsoid {
    pub fn new(omega: SpdMatrix, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ellipsoid radius must be positive, got {radius}"
            )));
        }
        Ok(Self {
            omega,
            radius,
            root: RootFinding::default(),
        })
    }

    pub fn with_root_finding(mut self, root: RootFinding) -> Self {
        self.root = root;
        self
    }

    pub fn omega(&self) -> &SpdMatrix {
        &self.omega
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, s: &Vector, rel_slack: f64) -> bool {
        self.omega.quad_form(s) <= self.radius * (1.0 + rel_slack)
    }

    /// argmin_{s' ∈ K} (s' − s)ᵀ B (s' − s), together with the multiplier λ.
    pub fn project(&self, b: &Matrix, s: &Vector) -> Result<(Vector, f64)> {
        let val = self.omega.quad_form(s);
        if val <= self.radius {
            return Ok((s.clone(), 0.0));
        }
        if let Some(c) = proportionality(b, self.omega.matrix()) {
            // B = cΩ: the multiplier solves (1 + λ/c)² = val / r.
            let scale = (self.radius / val).sqrt();
            let lambda = c * (1.0 / scale - 1.0);
            return Ok((s * scale, lambda));
        }
        self.project_kkt(b, s)
    }

    fn project_kkt(&self, b: &Matrix, s: &Vector) -> Result<(Vector, f64)> {
        let q = s.len();
        // B = LLᵀ, L⁻¹ Ω L⁻ᵀ = Q Λ Qᵀ. With y = Qᵀ Lᵀ s the solution of
        // (B + λΩ) s' = B s is s' = L⁻ᵀ Q (I + λΛ)⁻¹ y and
        // s'ᵀΩs' = Σ Λ_j y_j² / (1 + λΛ_j)².
        let chol = Cholesky::new(b.clone())
            .ok_or_else(|| Error::NotSpd("preconditioner at current state".into()))?;
        let l = chol.l();
        let l_inv = l
            .clone()
            .solve_lower_triangular(&Matrix::identity(q, q))
            .ok_or_else(|| Error::NotSpd("singular Cholesky factor".into()))?;
        let c = &l_inv * self.omega.matrix() * l_inv.transpose();
        let c = (&c + c.transpose()) * 0.5;
        let eig = SymmetricEigen::new(c);
        let lam = eig.eigenvalues;
        let basis = eig.eigenvectors;
        let y = basis.transpose() * (l.transpose() * s);

        let r = self.radius;
        let phi = |mu: f64| -> f64 {
            (0..q)
                .map(|j| {
                    let d = 1.0 + mu * lam[j];
                    lam[j] * y[j] * y[j] / (d * d)
                })
                .sum::<f64>()
                - r
        };
        let dphi = |mu: f64| -> f64 {
            -2.0 * (0..q)
                .map(|j| {
                    let d = 1.0 + mu * lam[j];
                    lam[j] * lam[j] * y[j] * y[j] / (d * d * d)
                })
                .sum::<f64>()
        };

        let tol = self.root.rel_tol * r;
        let mut lo = 0.0;
        let mut hi = 1.0 / lam.max().max(f64::MIN_POSITIVE);
        let mut iterations = 0;
        while phi(hi) > 0.0 {
            lo = hi;
            hi *= 2.0;
            iterations += 1;
            if iterations > self.root.max_iter || !hi.is_finite() {
                return Err(Error::RootFinding {
                    iterations,
                    lo,
                    hi,
                    residual: phi(hi),
                });
            }
        }

        // Newton on ψ(μ) = (φ(μ) + r)^{-1/2} − r^{-1/2}, which is close to
        // linear in μ, safeguarded by bisection on [lo, hi].
        let mut mu = 0.5 * (lo + hi);
        let mut f = phi(mu);
        for _ in 0..self.root.max_iter {
            if f.abs() <= tol {
                return Ok((self.recover(&l_inv, &basis, &lam, &y, mu), mu));
            }
            if f > 0.0 {
                lo = mu;
            } else {
                hi = mu;
            }
            let val = f + r;
            let psi = val.powf(-0.5) - r.powf(-0.5);
            let dpsi = -0.5 * val.powf(-1.5) * dphi(mu);
            let newton = mu - psi / dpsi;
            mu = if dpsi != 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            f = phi(mu);
            if hi - lo <= f64::EPSILON * hi && f.abs() > tol {
                break;
            }
        }
        if f.abs() <= tol {
            return Ok((self.recover(&l_inv, &basis, &lam, &y, mu), mu));
        }
        Err(Error::RootFinding {
            iterations: self.root.max_iter,
            lo,
            hi,
            residual: f,
        })
    }

    fn recover(&self, l_inv: &Matrix, basis: &Matrix, lam: &Vector, y: &Vector, mu: f64) -> Vector {
        let scaled = Vector::from_iterator(y.len(), (0..y.len()).map(|j| y[j] / (1.0 + mu * lam[j])));
        l_inv.transpose() * (basis * scaled)
    }
}

/// Returns c when B = cΩ to rounding.
fn proportionality(b: &Matrix, omega: &Matrix) -> Option<f64> {
    let c = b.dot(omega) / omega.dot(omega);
    if !(c > 0.0) {
        return None;
    }
    let resid = (b - omega * c).norm();
    (resid <= 1e-12 * b.norm()).then_some(c)
}

pub type ProxFn = Arc<dyn Fn(&Matrix, f64, &Vector) -> Result<Vector> + Send + Sync>;
pub type ValueFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

/// The nonsmooth part g.
#[derive(Clone)]
pub enum Regularizer {
    Zero,
    Ellipsoid(Ellipsoid),
    /// User-supplied weighted prox `(B, γ, s) ↦ Prox_{B,γg}(s)` and value `g`.
    Generic { prox: ProxFn, value: ValueFn },
}

impl fmt::Debug for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regularizer::Zero => write!(f, "Zero"),
            Regularizer::Ellipsoid(e) => f
                .debug_struct("Ellipsoid")
                .field("dim", &e.omega.dim())
                .field("radius", &e.radius)
                .finish(),
            Regularizer::Generic { .. } => write!(f, "Generic"),
        }
    }
}

impl Regularizer {
    pub fn ellipsoid(omega: SpdMatrix, radius: f64) -> Result<Self> {
        Ok(Regularizer::Ellipsoid(Ellipsoid::new(omega, radius)?))
    }

    /// g(s). Indicators accept points within a relative slack of 1e-9.
    pub fn value(&self, s: &Vector) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::Ellipsoid(e) => {
                if e.contains(s, 1e-9) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Regularizer::Generic { value, .. } => value(s),
        }
    }

    pub fn is_indicator(&self) -> bool {
        matches!(self, Regularizer::Ellipsoid(_))
    }
}

/// Prox_{B,γg}(s).
pub fn weighted_prox(b: &Matrix, gamma: f64, reg: &Regularizer, s: &Vector) -> Result<Vector> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prox step must be nonnegative, got {gamma}"
        )));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("prox input is not finite".into()));
    }
    match reg {
        Regularizer::Zero => Ok(s.clone()),
        Regularizer::Ellipsoid(e) => e.project(b, s).map(|(p, _)| p),
        Regularizer::Generic { prox, .. } => prox(b, gamma, s),
    }
}

/// B(s)-weighted projection onto dom g, the default starting point.
pub fn project_domain(precond: &Preconditioner, reg: &Regularizer, s: &Vector) -> Result<Vector> {
    weighted_prox(&precond.at(s), 0.0, reg, s)
}

/// ‖Prox_{B(s_eval),γg}(s_prev + γ h(s_prev)) − s_prev‖² / γ².
pub fn prox_fixed_point_residual<H>(
    s_prev: &Vector,
    s_eval: &Vector,
    gamma: f64,
    h: H,
    precond: &Preconditioner,
    reg: &Regularizer,
) -> Result<f64>
where
    H: FnOnce(&Vector) -> Result<Vector>,
{
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fixed-point residual needs a positive step, got {gamma}"
        )));
    }
    let field = h(s_prev)?;
    let moved = s_prev + &field * gamma;
    let out = weighted_prox(&precond.at(s_eval), gamma, reg, &moved)?;
    Ok((out - s_prev).norm_squared() / (gamma * gamma))
}
