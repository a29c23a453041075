//! Logistic regression with Gaussian latent predictors, in expectation space.
//!
//! Observation i has covariates X_i and label Y_i ∈ {−1, 1}; its latent
//! predictor Z_i ~ N_d(θ, σ²I) enters through P(Y_i = 1 | Z_i) = σ(⟨X_i, Z_i⟩).
//! Only the projection z = ⟨X_i, Z_i⟩/‖X_i‖ matters, whose conditional law is
//!
//! ```text
//! p_i(z; θ) ∝ σ(a_i z) · N(z; μ_i, σ²),   a_i = Y_i ‖X_i‖,   μ_i = ⟨X_i, θ⟩ / ‖X_i‖.
//! ```
//!
//! With s_i(z) = z X_i / (‖X_i‖σ²) and Ω = ((σ²n)⁻¹ Σ X_iX_iᵀ/‖X_i‖² + 2τI)⁻¹,
//! EM runs in s-space with θ = Ωs and mean field
//! h(s) = n⁻¹ Σ_i E_{p_i(·;Ωs)}[s_i(z)] − s = −Ω⁻¹ ∇W(s), W(s) = F(Ωs).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::oracle::{Aggregation, GradientOracle, LipschitzData};
use crate::prox::{Matrix, Preconditioner, Regularizer, SpdMatrix, Vector};
use crate::quadrature::{log_sum_exp, GaussHermite};
use crate::rng::StreamRng;

pub const DEFAULT_NODES: usize = 64;
pub const SAMPLER_CAP: usize = 1_000_000;

/// ln σ(x) without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<f64>,
    norms: Vec<f64>,
}

impl Dataset {
    /// Rejects empty data, labels outside {−1, 1}, non-finite entries and
    /// zero rows (reported with 1-based row numbers).
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::Dataset(format!("empty dataset ({n} x {d})")));
        }
        if y.len() != n {
            return Err(Error::Dataset(format!("{} labels for {n} rows", y.len())));
        }
        if let Some(i) = y.iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::Dataset(format!("row {}: label {} not in {{-1, 1}}", i + 1, y[i])));
        }
        if let Some(i) = (0..n).find(|&i| x.row(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::Dataset(format!("row {}: non-finite covariate", i + 1)));
        }
        let norms: Vec<f64> = (0..n).map(|i| x.row(i).norm()).collect();
        let zero: Vec<String> = (0..n).filter(|&i| norms[i] == 0.0).map(|i| (i + 1).to_string()).collect();
        if !zero.is_empty() {
            return Err(Error::Dataset(format!("zero-norm covariate rows: {}", zero.join(", "))));
        }
        Ok(Self { x, y, norms })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// X_i / ‖X_i‖
    pub fn unit_row(&self, i: usize) -> Vector {
        self.x.row(i).transpose() / self.norms[i]
    }

    /// Header `y,x1,..,xd`, one row per observation, floats with 17
    /// significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.d()).map(|j| format!("x{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n() {
            let mut row = vec![format!("{}", self.y[i] as i64)];
            row.extend(self.x.row(i).iter().map(|v| format_f64(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = r.headers().map_err(csv_err)?.clone();
        let d = header.len().saturating_sub(1);
        let names_ok = header.get(0).map(str::trim) == Some("y")
            && (1..=d).all(|j| header.get(j).map(str::trim) == Some(format!("x{j}").as_str()));
        if d == 0 || !names_ok {
            return Err(Error::Dataset(format!(
                "header must be y,x1,..,xd; got {}",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != d + 1 {
                return Err(Error::Dataset(format!("row {}: expected {} fields, got {}", row + 1, d + 1, rec.len())));
            }
            let parse = |j: usize| -> Result<f64> {
                rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Dataset(format!("row {}, column {}: {e}", row + 1, j + 1)))
            };
            ys.push(parse(0)?);
            for j in 1..=d {
                xs.push(parse(j)?);
            }
        }
        let n = ys.len();
        Dataset::new(Matrix::from_row_slice(n, d, &xs), ys)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Dataset(format!("{other:?}")),
    }
}

/// 17 significant digits, round-trips every f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub sigma2: f64,
    pub tau: f64,
}

impl ModelParams {
    pub fn new(sigma2: f64, tau: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && tau > 0.0 && sigma2.is_finite() && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 and tau must be positive (got {sigma2}, {tau})"
            )));
        }
        Ok(Self { sigma2, tau })
    }
}

/// Ω = ((σ²n)⁻¹ Σ_i X_iX_iᵀ/‖X_i‖² + 2τI)⁻¹.
#[derive(Debug, Clone)]
pub struct OmegaMatrix {
    omega: SpdMatrix,
    eigenvalues: Vector,
}

impl OmegaMatrix {
    pub fn matrix(&self) -> &Matrix {
        self.omega.matrix()
    }

    pub fn inverse(&self) -> &Matrix {
        self.omega.inverse()
    }

    pub fn spd(&self) -> &SpdMatrix {
        &self.omega
    }

    pub fn lambda_min(&self) -> f64 {
        self.omega.eig_min()
    }

    pub fn lambda_max(&self) -> f64 {
        self.omega.eig_max()
    }

    pub fn eigenvalues(&self) -> &Vector {
        &self.eigenvalues
    }
}

pub fn compute_omega(data: &Dataset, params: &ModelParams) -> Result<OmegaMatrix> {
    let d = data.d();
    let n = data.n();
    let mut precision = Matrix::zeros(d, d);
    for i in 0..n {
        let u = data.unit_row(i);
        precision += &u * u.transpose();
    }
    precision /= params.sigma2 * n as f64;
    for j in 0..d {
        precision[(j, j)] += 2.0 * params.tau;
    }
    let precision = SpdMatrix::new(precision)?;
    let omega = SpdMatrix::new(precision.inverse().clone())?;
    let eigenvalues = SymmetricEigen::new(omega.matrix().clone()).eigenvalues;
    Ok(OmegaMatrix { omega, eigenvalues })
}

/// K = {s : sᵀΩs ≤ ln 4 / (τ λ_min(Ω))} as an indicator regularizer.
pub fn constraint_set(omega: &OmegaMatrix, tau: f64) -> Result<Regularizer> {
    if !(omega.lambda_min() > 0.0 && tau > 0.0) {
        return Err(Error::InvalidArgument("constraint set needs lambda_min > 0 and tau > 0".into()));
    }
    Regularizer::ellipsoid(omega.spd().clone(), 4f64.ln() / (tau * omega.lambda_min()))
}

/// The 1-D posterior of observation i: σ(slope·z)·N(z; mu, σ²), normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSpec {
    pub index: usize,
    pub mu: f64,
    pub slope: f64,
    pub sigma2: f64,
}

impl PosteriorSpec {
    /// ln of the unnormalized density σ(a z) exp(z μ/σ² − z²/(2σ²)).
    pub fn log_unnormalized(&self, z: f64) -> f64 {
        log_sigmoid(self.slope * z) + z * self.mu / self.sigma2 - z * z / (2.0 * self.sigma2)
    }

    fn log_weights(&self, rule: &GaussHermite) -> Result<(Vec<f64>, Vec<f64>)> {
        let (zs, mut lw): (Vec<f64>, Vec<f64>) = rule
            .gaussian_points(self.mu, self.sigma2)
            .map(|(z, w)| (z, w + log_sigmoid(self.slope * z)))
            .unzip();
        let total = log_sum_exp(&lw);
        if !total.is_finite() {
            return Err(Error::QuadratureUnderflow {
                index: self.index,
                mu: self.mu,
                slope: self.slope,
            });
        }
        lw.iter_mut().for_each(|w| *w -= total);
        Ok((zs, lw))
    }

    /// (E[z], E[z²]) by self-normalized Gauss–Hermite quadrature.
    pub fn moments(&self, rule: &GaussHermite) -> Result<(f64, f64)> {
        let (zs, lw) = self.log_weights(rule)?;
        let (mut m1, mut m2) = (0.0, 0.0);
        for (z, w) in zs.iter().zip(&lw) {
            let w = w.exp();
            m1 += w * z;
            m2 += w * z * z;
        }
        Ok((m1, m2))
    }

    /// Var[z], computed about the mean to avoid cancellation.
    pub fn variance(&self, rule: &GaussHermite) -> Result<f64> {
        let (zs, lw) = self.log_weights(rule)?;
        let mean: f64 = zs.iter().zip(&lw).map(|(z, w)| w.exp() * z).sum();
        Ok(zs.iter().zip(&lw).map(|(z, w)| w.exp() * (z - mean).powi(2)).sum())
    }

    /// ln E_{N(μ,σ²)}[σ(a z)], the log marginal probability of the label.
    pub fn log_evidence(&self, rule: &GaussHermite) -> Result<f64> {
        let lw: Vec<f64> = rule
            .gaussian_points(self.mu, self.sigma2)
            .map(|(z, w)| w + log_sigmoid(self.slope * z))
            .collect();
        let total = log_sum_exp(&lw);
        if !total.is_finite() {
            return Err(Error::QuadratureUnderflow {
                index: self.index,
                mu: self.mu,
                slope: self.slope,
            });
        }
        Ok(total)
    }

    /// Exact draw: propose N(μ, σ²), accept with probability σ(a z).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, cap: usize) -> Result<f64> {
        let sd = self.sigma2.sqrt();
        for _ in 0..cap {
            let e: f64 = StandardNormal.sample(rng);
            let z = self.mu + sd * e;
            let u: f64 = rng.random();
            if u < sigmoid(self.slope * z) {
                return Ok(z);
            }
        }
        Err(Error::SamplerCap {
            index: self.index,
            cap,
            mu: self.mu,
            slope: self.slope,
        })
    }
}

/// The latent-variable logistic model with its exact (quadrature) and Monte
/// Carlo (rejection sampling) oracles.
#[derive(Debug, Clone)]
pub struct LatentLogistic {
    data: Dataset,
    params: ModelParams,
    omega: OmegaMatrix,
    units: Vec<Vector>,
    rule: GaussHermite,
    sampler_cap: usize,
}

impl LatentLogistic {
    pub fn new(data: Dataset, params: ModelParams) -> Result<Self> {
        Self::with_nodes(data, params, DEFAULT_NODES)
    }

    pub fn with_nodes(data: Dataset, params: ModelParams, nodes: usize) -> Result<Self> {
        if nodes < 16 {
            return Err(Error::InvalidArgument(format!("need at least 16 quadrature nodes, got {nodes}")));
        }
        let omega = compute_omega(&data, &params)?;
        let units = (0..data.n()).map(|i| data.unit_row(i)).collect();
        Ok(Self {
            rule: GaussHermite::new(nodes)?,
            data,
            params,
            omega,
            units,
            sampler_cap: SAMPLER_CAP,
        })
    }

    pub fn with_sampler_cap(mut self, cap: usize) -> Self {
        self.sampler_cap = cap;
        self
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn omega(&self) -> &OmegaMatrix {
        &self.omega
    }

    pub fn nodes(&self) -> usize {
        self.rule.len()
    }

    pub fn theta(&self, s: &Vector) -> Vector {
        self.omega.matrix() * s
    }

    pub fn posterior(&self, i: usize, theta: &Vector) -> PosteriorSpec {
        PosteriorSpec {
            index: i,
            mu: self.units[i].dot(theta),
            slope: self.data.y[i] * self.data.norms[i],
            sigma2: self.params.sigma2,
        }
    }

    /// s_i(z) scaled back: X_i/(‖X_i‖σ²)·z − s.
    fn statistic(&self, i: usize, mean_z: f64, s: &Vector) -> Vector {
        &self.units[i] * (mean_z / self.params.sigma2) - s
    }

    /// ∫ s_i(z) p_i(z; Ωs) dz − s, with `rule` in place of the default nodes.
    pub fn h_i_quadrature(&self, i: usize, s: &Vector, rule: &GaussHermite) -> Result<Vector> {
        let (m1, _) = self.posterior(i, &self.theta(s)).moments(rule)?;
        Ok(self.statistic(i, m1, s))
    }

    pub fn sample_posterior<R: Rng + ?Sized>(&self, i: usize, theta: &Vector, rng: &mut R) -> Result<f64> {
        self.posterior(i, theta).sample(rng, self.sampler_cap)
    }

    /// F(θ) = −n⁻¹ Σ_i ln ∫ σ(Y_i‖X_i‖z) exp(⟨s_i(z), θ⟩) N(z; 0, σ²) dz + ½ θᵀΩ⁻¹θ.
    ///
    /// The Gaussian factor is normalized, so F(0) = ln 2.
    pub fn objective_f(&self, theta: &Vector) -> Result<f64> {
        self.objective_f_with(theta, &self.rule)
    }

    pub fn objective_f_with(&self, theta: &Vector, rule: &GaussHermite) -> Result<f64> {
        let n = self.data.n();
        let mut acc = 0.0;
        for i in 0..n {
            let post = self.posterior(i, theta);
            // ∫ σ(a z) e^{zμ/σ²} N(z; 0, σ²) dz = e^{μ²/(2σ²)} E_{N(μ,σ²)}[σ(a z)].
            acc += post.log_evidence(rule)? + post.mu * post.mu / (2.0 * self.params.sigma2);
        }
        let penalty = 0.5 * theta.dot(&(self.omega.inverse() * theta));
        Ok(-acc / n as f64 + penalty)
    }

    /// W(s) = F(Ωs).
    pub fn objective_w(&self, s: &Vector) -> Result<f64> {
        self.objective_f(&self.theta(s))
    }

    /// ∇W(s) = −Ω h(s), from the quadrature mean field.
    pub fn gradient_w(&self, s: &Vector) -> Result<Vector> {
        Ok(-(self.omega.matrix() * crate::oracle::mean_field(self, s)?))
    }

    pub fn constraint_set(&self) -> Result<Regularizer> {
        constraint_set(&self.omega, self.params.tau)
    }

    /// B = Ω, from h = −B⁻¹∇W and ∇W = −Ωh. B is proportional to the
    /// ellipsoid matrix of K, so the weighted prox is a radial scaling.
    pub fn preconditioner(&self) -> Result<Preconditioner> {
        Preconditioner::constant_with_bounds(
            self.omega.matrix().clone(),
            self.omega.lambda_min(),
            self.omega.lambda_max(),
        )
    }

    /// Lipschitz constants valid on all of R^d.
    ///
    /// The Jacobian of h_i is c·x̂x̂ᵀΩ − I with c = Var[z]/σ⁴ ∈ [0, 1/σ²]
    /// (a logistic tilt of a Gaussian cannot increase its variance), and the
    /// spectral norm is convex in c, so L_i is attained at an endpoint. The
    /// Hessian of W lies between 2τΩ² and Ω, so L_Ẇ = λ_max(Ω).
    pub fn lipschitz(&self, aggregation: Aggregation) -> Result<LipschitzData> {
        let d = self.data.d();
        let id = Matrix::identity(d, d);
        let per_index = self
            .units
            .iter()
            .map(|u| {
                let jac = u * (u.transpose() * self.omega.matrix()) / self.params.sigma2 - &id;
                jac.singular_values().max().max(1.0)
            })
            .collect();
        LipschitzData::from_per_index(per_index, self.omega.lambda_max(), aggregation)
    }
}

impl GradientOracle for LatentLogistic {
    fn n(&self) -> usize {
        self.data.n()
    }

    fn dim(&self) -> usize {
        self.data.d()
    }

    fn has_exact(&self) -> bool {
        true
    }

    fn has_mc(&self) -> bool {
        true
    }

    fn eval_exact(&self, i: usize, s: &Vector) -> Result<Vector> {
        self.h_i_quadrature(i, s, &self.rule)
    }

    /// ĥ_i(s) = X_i/(‖X_i‖σ²)·(m⁻¹ Σ_r z_r) − s, z_r ~ p_i(·; Ωs).
    fn eval_mc(&self, i: usize, s: &Vector, m: usize, rng: &mut StreamRng) -> Result<Vector> {
        if m == 0 {
            return Err(Error::InvalidArgument("Monte Carlo budget must be positive".into()));
        }
        let post = self.posterior(i, &self.theta(s));
        let mut total = 0.0;
        for _ in 0..m {
            total += post.sample(rng, self.sampler_cap)?;
        }
        Ok(self.statistic(i, total / m as f64, s))
    }

    /// ‖x̂_i‖² Var[z] / σ⁴ = Var[z] / σ⁴.
    fn statistic_variance(&self, i: usize, s: &Vector) -> Result<f64> {
        let var = self.posterior(i, &self.theta(s)).variance(&self.rule)?;
        Ok(var / (self.params.sigma2 * self.params.sigma2))
    }
}

/// Synthetic data with the shape of the latent model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub sigma2: f64,
    /// ‖θ⋆‖; zero gives balanced labels.
    pub theta_scale: f64,
    /// ‖X_i‖ of every row.
    pub row_scale: f64,
}

impl SyntheticSpec {
    pub fn new(n: usize, d: usize, sigma2: f64) -> Self {
        Self {
            n,
            d,
            sigma2,
            theta_scale: 1.0,
            row_scale: 1.0,
        }
    }
}

/// Draws θ⋆ = theta_scale·u/‖u‖, rows X_i = row_scale·g_i/‖g_i‖ with Gaussian
/// u, g_i, latent Z_i ~ N_d(θ⋆, σ²I) and Y_i = +1 with probability σ(⟨X_i, Z_i⟩).
pub fn generate_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<(Dataset, Vector)> {
    let SyntheticSpec {
        n,
        d,
        sigma2,
        theta_scale,
        row_scale,
    } = *spec;
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("synthetic data needs n, d >= 1 (got {n}, {d})")));
    }
    if !(sigma2 > 0.0 && theta_scale >= 0.0 && row_scale > 0.0) {
        return Err(Error::InvalidArgument("synthetic spec needs sigma2 > 0, theta_scale >= 0, row_scale > 0".into()));
    }
    let u = nonzero_normal(d, rng);
    let theta = &u / u.norm() * theta_scale;
    let mut x = Matrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    let sd = sigma2.sqrt();
    for i in 0..n {
        let g = nonzero_normal(d, rng);
        let row = &g / g.norm() * row_scale;
        let z = &theta + gaussian_vector(d, rng) * sd;
        let p = sigmoid(row.dot(&z));
        y.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
        x.set_row(i, &row.transpose());
    }
    Ok((Dataset::new(x, y)?, theta))
}

fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    Vector::from_fn(d, |_, _| StandardNormal.sample(&mut *rng))
}

fn nonzero_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    loop {
        let v = gaussian_vector(d, rng);
        if v.norm() > 0.0 {
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::mean_field;
    use crate::rng::{stream, Purpose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> LatentLogistic {
        let x = Matrix::from_row_slice(4, 2, &[1.0, 0.5, -0.3, 1.2, 0.8, -0.7, -1.1, -0.2]);
        let data = Dataset::new(x, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        LatentLogistic::new(data, ModelParams::new(0.5, 1.0).unwrap()).unwrap()
    }

    fn trapezoid<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize) -> f64 {
        let h = (hi - lo) / (points - 1) as f64;
        let inner: f64 = (1..points - 1).map(|k| f(lo + k as f64 * h)).sum();
        h * (inner + 0.5 * (f(lo) + f(hi)))
    }

    #[test]
    fn omega_single_row() {
        let data = Dataset::new(Matrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![1.0]).unwrap();
        let om = compute_omega(&data, &ModelParams::new(1.0, 1.0).unwrap()).unwrap();
        let want = Matrix::from_diagonal(&Vector::from_vec(vec![1.0 / 3.0, 0.5]));
        assert!((om.matrix() - want).amax() < 1e-15);
    }

    #[test]
    fn omega_large_penalty_limit() {
        let data = Dataset::new(Matrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]), vec![1.0, -1.0]).unwrap();
        let tau = 1e6;
        let om = compute_omega(&data, &ModelParams::new(1.0, tau).unwrap()).unwrap();
        let want = Matrix::identity(2, 2) / (2.0 * tau);
        assert!((om.matrix() - &want).amax() / want.amax() <= 1e-6);
    }

    #[test]
    fn omega_random_is_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, _) = generate_synthetic(&SyntheticSpec::new(50, 5, 0.1), &mut rng).unwrap();
        let om = compute_omega(&data, &ModelParams::new(0.1, 1.0).unwrap()).unwrap();
        assert!(om.lambda_min() > 0.0);
        assert!((om.matrix() - om.matrix().transpose()).amax() == 0.0);
        assert!((om.matrix() * om.inverse() - Matrix::identity(5, 5)).amax() <= 1e-10);
    }

    #[test]
    fn rejects_bad_rows() {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let err = Dataset::new(x, vec![1.0, 1.0, -1.0]).unwrap_err().to_string();
        assert!(err.contains("2, 3"), "{err}");
        let x = Matrix::from_row_slice(1, 1, &[1.0]);
        assert!(Dataset::new(x, vec![0.0]).is_err());
    }

    #[test]
    fn symmetric_posterior_when_untilted() {
        let data = Dataset::new(Matrix::from_row_slice(1, 1, &[1.0]), vec![1.0]).unwrap();
        let model = LatentLogistic::new(data, ModelParams::new(1.0, 1.0).unwrap()).unwrap();
        let post = PosteriorSpec {
            index: 0,
            mu: 0.7,
            slope: 0.0,
            sigma2: 1.0,
        };
        let (m1, _) = post.moments(&model.rule).unwrap();
        assert!((m1 - 0.7).abs() < 1e-13);
        let s = Vector::from_vec(vec![0.0]);
        let h = model.eval_exact(0, &s).unwrap();
        // θ = 0, a = 1: E[z] = E[z σ(z)] / E[σ(z)] under N(0,1) is positive.
        assert!(h[0] > 0.0);
    }

    #[test]
    fn posterior_mean_matches_trapezoid() {
        let post = PosteriorSpec {
            index: 0,
            mu: 0.0,
            slope: 1.0,
            sigma2: 1.0,
        };
        let rule = GaussHermite::new(64).unwrap();
        let (m1, _) = post.moments(&rule).unwrap();
        let dens = |z: f64| post.log_unnormalized(z).exp();
        let num = trapezoid(|z| z * dens(z), -40.0, 40.0, 1_000_001);
        let den = trapezoid(dens, -40.0, 40.0, 1_000_001);
        assert!((m1 - num / den).abs() < 1e-8, "{m1} vs {}", num / den);
    }

    #[test]
    fn tilted_density_identity() {
        // Paper form: σ(Y‖X‖z) exp(⟨s_i(z), θ⟩ − z²/(2σ²)); ours: σ(a z) N(z; μ, σ²).
        let model = toy();
        let theta = Vector::from_vec(vec![0.4, -0.9]);
        for i in 0..4 {
            let post = model.posterior(i, &theta);
            let x = model.data.x.row(i).transpose();
            let nx = x.norm();
            let ratios: Vec<f64> = (0..100)
                .map(|k| {
                    let z = -3.0 + 0.06 * k as f64;
                    let s_i = &x * (z / (nx * model.params.sigma2));
                    let paper = log_sigmoid(model.data.y[i] * nx * z) + s_i.dot(&theta) - z * z / (2.0 * model.params.sigma2);
                    let ours = log_sigmoid(post.slope * z) - (z - post.mu).powi(2) / (2.0 * post.sigma2);
                    paper - ours
                })
                .collect();
            let mean = ratios.iter().sum::<f64>() / 100.0;
            let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
            assert!(sd <= 1e-10, "row {i}: sd {sd}");
        }
    }

    #[test]
    fn objective_at_zero_is_ln2() {
        let model = toy();
        let f0 = model.objective_f(&Vector::zeros(2)).unwrap();
        assert!((f0 - 2f64.ln()).abs() < 1e-14);
        let theta = Vector::from_vec(vec![0.3, 0.2]);
        let r = 0.5 * theta.dot(&(model.omega.inverse() * &theta));
        let f = model.objective_f(&theta).unwrap();
        let data_term: f64 = (0..4)
            .map(|i| {
                let p = model.posterior(i, &theta);
                p.log_evidence(&model.rule).unwrap() + p.mu * p.mu / (2.0 * p.sigma2)
            })
            .sum::<f64>()
            / 4.0;
        assert!((f - (r - data_term)).abs() < 1e-14);
    }

    #[test]
    fn objective_node_refinement() {
        let model = toy();
        let fine = GaussHermite::new(256).unwrap();
        let theta = Vector::from_vec(vec![0.5, -0.4]);
        let a = model.objective_f(&theta).unwrap();
        let b = model.objective_f_with(&theta, &fine).unwrap();
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn mean_field_node_refinement() {
        let model = toy();
        let fine = GaussHermite::new(256).unwrap();
        let s = Vector::zeros(2);
        let coarse = mean_field(&model, &s).unwrap();
        let refined = (0..4).fold(Vector::zeros(2), |acc, i| acc + model.h_i_quadrature(i, &s, &fine).unwrap()) / 4.0;
        assert!((&coarse - &refined).amax() <= 1e-10, "{coarse} vs {refined}");
    }

    #[test]
    fn gradient_identity_on_toy() {
        let model = toy();
        let s = Vector::from_vec(vec![0.2, -0.1]);
        let grad = model.gradient_w(&s).unwrap();
        let eps = 1e-5;
        for j in 0..2 {
            let mut e = Vector::zeros(2);
            e[j] = eps;
            let fd = (model.objective_w(&(&s + &e)).unwrap() - model.objective_w(&(&s - &e)).unwrap()) / (2.0 * eps);
            assert!((fd - grad[j]).abs() <= 1e-4 * grad.norm(), "{fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn preconditioner_maps_gradient_to_mean_field() {
        let model = toy();
        let s = Vector::from_vec(vec![-0.3, 0.15]);
        let eps = 1e-5;
        let fd = Vector::from_fn(2, |j, _| {
            let mut e = Vector::zeros(2);
            e[j] = eps;
            (model.objective_w(&(&s + &e)).unwrap() - model.objective_w(&(&s - &e)).unwrap()) / (2.0 * eps)
        });
        let b = model.preconditioner().unwrap();
        let via_b = -(b.at(&s).into_owned().try_inverse().unwrap() * fd);
        let h = crate::oracle::mean_field(&model, &s).unwrap();
        assert!((&via_b - &h).norm() <= 1e-4 * h.norm(), "{via_b} vs {h}");
        assert_eq!(b.v_min(), model.omega().lambda_min());
    }

    #[test]
    fn sampler_matches_quadrature_and_mirrors() {
        let rule = GaussHermite::new(64).unwrap();
        let post = PosteriorSpec {
            index: 0,
            mu: 0.0,
            slope: 1.0,
            sigma2: 1.0,
        };
        let (m1, m2) = post.moments(&rule).unwrap();
        let mut rng = stream(1, Purpose::Diagnostic, 0, 0, 0);
        let draws = 200_000;
        let mut pos: Vec<f64> = (0..draws).map(|_| post.sample(&mut rng, SAMPLER_CAP).unwrap()).collect();
        let mean = pos.iter().sum::<f64>() / draws as f64;
        let se = ((m2 - m1 * m1) / draws as f64).sqrt();
        assert!((mean - m1).abs() <= 4.0 * se, "{mean} vs {m1}");

        let flipped = PosteriorSpec { slope: -1.0, ..post };
        let mut neg: Vec<f64> = (0..draws).map(|_| -flipped.sample(&mut rng, SAMPLER_CAP).unwrap()).collect();
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        // Two-sample Kolmogorov–Smirnov at the 1% level.
        let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
        while i < draws && j < draws {
            if pos[i] <= neg[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 - j as f64).abs() / draws as f64);
        }
        let crit = 1.628 * (2.0 / draws as f64).sqrt();
        assert!(ks <= crit, "KS {ks} > {crit}");
    }

    #[test]
    fn sampler_cap_is_reported() {
        let post = PosteriorSpec {
            index: 3,
            mu: -50.0,
            slope: 10.0,
            sigma2: 0.01,
        };
        let mut rng = stream(1, Purpose::Diagnostic, 0, 0, 0);
        assert!(matches!(post.sample(&mut rng, 100), Err(Error::SamplerCap { index: 3, .. })));
    }

    #[test]
    fn mc_oracle_converges_to_quadrature() {
        let model = toy();
        let s = Vector::from_vec(vec![0.3, 0.1]);
        let exact = model.eval_exact(2, &s).unwrap();
        let m = 1_000_000;
        let mc = model.eval_mc(2, &s, m, &mut stream(5, Purpose::Diagnostic, 0, 0, 0)).unwrap();
        let sd = model.statistic_variance(2, &s).unwrap().sqrt();
        assert!((mc - exact).norm() <= 4.0 * sd / (m as f64).sqrt());
        assert!(model.has_exact() && model.has_mc());
    }

    #[test]
    fn untilted_symmetric_field_vanishes_at_origin() {
        let data = Dataset::new(Matrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]), vec![1.0, -1.0]).unwrap();
        let model = LatentLogistic::new(data, ModelParams::new(0.3, 1.0).unwrap()).unwrap();
        let h = mean_field(&model, &Vector::zeros(2)).unwrap();
        assert!(h.amax() < 1e-14);
    }

    #[test]
    fn constraint_radius() {
        let om = compute_omega(
            &Dataset::new(Matrix::from_row_slice(1, 1, &[1.0]), vec![1.0]).unwrap(),
            &ModelParams::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        // Ω = 1/3 here, so r = ln 4 · 3.
        match constraint_set(&om, 1.0).unwrap() {
            Regularizer::Ellipsoid(e) => assert!((e.radius() - 3.0 * 4f64.ln()).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (data, _) = generate_synthetic(&SyntheticSpec::new(8, 2, 0.1), &mut rng).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, data);
        assert!(Dataset::read_csv("y,x1\n1,0\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("y,z1\n1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_balance_and_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = SyntheticSpec {
            theta_scale: 0.0,
            ..SyntheticSpec::new(10_000, 3, 0.1)
        };
        let (data, _) = generate_synthetic(&spec, &mut rng).unwrap();
        let pos = data.y().iter().filter(|&&y| y > 0.0).count() as f64 / 10_000.0;
        assert!((pos - 0.5).abs() <= 0.01, "{pos}");

        let spec = SyntheticSpec {
            theta_scale: 20.0,
            ..SyntheticSpec::new(5_000, 1, 0.1)
        };
        let (data, theta) = generate_synthetic(&spec, &mut rng).unwrap();
        let hits = (0..data.n())
            .filter(|&i| (data.x()[(i, 0)] * theta[0]).signum() == data.y()[i])
            .count();
        assert!(hits as f64 / 5_000.0 >= 0.9);

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let s = SyntheticSpec::new(20, 3, 0.1);
        assert_eq!(generate_synthetic(&s, &mut a).unwrap(), generate_synthetic(&s, &mut b).unwrap());
    }

    #[test]
    fn lipschitz_bounds_jacobian() {
        let model = toy();
        let lip = model.lipschitz(Aggregation::Max).unwrap();
        let per = lip.per_index.clone().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = Vector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let t = Vector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            for (i, l_i) in per.iter().enumerate() {
                let diff = (model.eval_exact(i, &s).unwrap() - model.eval_exact(i, &t).unwrap()).norm();
                assert!(diff <= l_i * (&s - &t).norm() * (1.0 + 1e-9));
            }
            let gd = (model.gradient_w(&s).unwrap() - model.gradient_w(&t).unwrap()).norm();
            assert!(gd <= lip.l_wdot * (&s - &t).norm() * (1.0 + 1e-9));
        }
    }
}
