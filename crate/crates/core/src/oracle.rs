//! Per-index preconditioned-gradient oracles and minibatch sampling.
//!
//! An oracle exposes the functions h_i with h(s) = n⁻¹ Σ h_i(s) = −B(s)⁻¹∇W(s),
//! either exactly or as Monte Carlo averages ĥ_i = m⁻¹ Σ_r H_i(Z_r) with
//! Z_r i.i.d. from π_{i,s}. Indices are zero-based.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::prox::Vector;
use crate::rng::{self, Purpose, StreamRng};

pub trait GradientOracle: Send + Sync {
    /// Number of components n.
    fn n(&self) -> usize;

    /// Dimension q of the state.
    fn dim(&self) -> usize;

    fn has_exact(&self) -> bool;

    fn has_mc(&self) -> bool;

    fn eval_exact(&self, _i: usize, _s: &Vector) -> Result<Vector> {
        Err(Error::MissingCapability("exact"))
    }

    /// Monte Carlo estimate of h_i(s) from `m` draws taken from `rng`.
    fn eval_mc(&self, _i: usize, _s: &Vector, _m: usize, _rng: &mut StreamRng) -> Result<Vector> {
        Err(Error::MissingCapability("monte carlo"))
    }

    /// ∫ ‖H_i(z) − h_i(s)‖² π_{i,s}(dz).
    fn statistic_variance(&self, _i: usize, _s: &Vector) -> Result<f64> {
        Err(Error::MissingCapability("statistic variance"))
    }
}

impl<T: GradientOracle + ?Sized> GradientOracle for &T {
    fn n(&self) -> usize {
        (**self).n()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn has_exact(&self) -> bool {
        (**self).has_exact()
    }
    fn has_mc(&self) -> bool {
        (**self).has_mc()
    }
    fn eval_exact(&self, i: usize, s: &Vector) -> Result<Vector> {
        (**self).eval_exact(i, s)
    }
    fn eval_mc(&self, i: usize, s: &Vector, m: usize, rng: &mut StreamRng) -> Result<Vector> {
        (**self).eval_mc(i, s, m, rng)
    }
    fn statistic_variance(&self, i: usize, s: &Vector) -> Result<f64> {
        (**self).statistic_variance(i, s)
    }
}

/// Presents an exact oracle as a noiseless Monte Carlo one.
#[derive(Debug, Clone, Copy)]
pub struct Noiseless<O>(pub O);

impl<O: GradientOracle> GradientOracle for Noiseless<O> {
    fn n(&self) -> usize {
        self.0.n()
    }
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn has_exact(&self) -> bool {
        self.0.has_exact()
    }
    fn has_mc(&self) -> bool {
        self.0.has_exact()
    }
    fn eval_exact(&self, i: usize, s: &Vector) -> Result<Vector> {
        self.0.eval_exact(i, s)
    }
    fn eval_mc(&self, i: usize, s: &Vector, _m: usize, _rng: &mut StreamRng) -> Result<Vector> {
        self.0.eval_exact(i, s)
    }
    fn statistic_variance(&self, _i: usize, _s: &Vector) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinibatchSampler {
    n: usize,
    b: usize,
    mode: SamplingMode,
}

impl MinibatchSampler {
    pub fn new(n: usize, b: usize, mode: SamplingMode) -> Result<Self> {
        if n == 0 || b == 0 {
            return Err(Error::InvalidArgument(format!(
                "population and batch size must be positive (n = {n}, b = {b})"
            )));
        }
        if mode == SamplingMode::WithoutReplacement && b > n {
            return Err(Error::InvalidArgument(format!(
                "batch of {b} without replacement from {n} indices"
            )));
        }
        Ok(Self { n, b, mode })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        match self.mode {
            SamplingMode::WithReplacement => (0..self.b).map(|_| rng.random_range(0..self.n)).collect(),
            SamplingMode::WithoutReplacement => index::sample(rng, self.n, self.b).into_vec(),
        }
    }
}

/// h(s) = n⁻¹ Σ_i h_i(s), summed in index order.
pub fn mean_field<O: GradientOracle + ?Sized>(oracle: &O, s: &Vector) -> Result<Vector> {
    if !oracle.has_exact() {
        return Err(Error::MissingCapability("exact"));
    }
    let n = oracle.n();
    let mut acc = Vector::zeros(oracle.dim());
    for i in 0..n {
        acc += oracle.eval_exact(i, s)?;
    }
    Ok(acc / n as f64)
}

/// How draws at the two states of an η evaluation relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draws {
    /// Fresh, independent draws at each state (the algorithm's setting).
    Independent,
    /// The same random stream at both states.
    Shared,
}

/// η = b⁻¹ Σ_{i∈batch} (ĥ_i(s_curr) − ĥ_i(s_prev) − h_i(s_curr) + h_i(s_prev)).
///
/// `seed` and `tag` key the random streams; batch position j owns its own
/// pair of streams so repeated indices get fresh draws.
#[allow(clippy::too_many_arguments)]
pub fn eta_error<O: GradientOracle + ?Sized>(
    oracle: &O,
    batch: &[usize],
    s_curr: &Vector,
    s_prev: &Vector,
    m: usize,
    seed: u64,
    tag: u64,
    draws: Draws,
) -> Result<Vector> {
    if !oracle.has_exact() {
        return Err(Error::MissingCapability("exact"));
    }
    if !oracle.has_mc() {
        return Err(Error::MissingCapability("monte carlo"));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut acc = Vector::zeros(oracle.dim());
    for (j, &i) in batch.iter().enumerate() {
        let mut rc = rng::stream(seed, Purpose::Diagnostic, tag, j as u64, 0);
        let mut rp = match draws {
            Draws::Independent => rng::stream(seed, Purpose::Diagnostic, tag, j as u64, 1),
            Draws::Shared => rc.clone(),
        };
        acc += oracle.eval_mc(i, s_curr, m, &mut rc)?;
        acc -= oracle.eval_mc(i, s_prev, m, &mut rp)?;
        acc -= oracle.eval_exact(i, s_curr)?;
        acc += oracle.eval_exact(i, s_prev)?;
    }
    Ok(acc / batch.len() as f64)
}

/// max over `states` of 2·n⁻¹ Σ_i Var_{π_{i,s}}(H_i).
///
/// This only sees the supplied states, so it is a lower surrogate of the
/// supremum over the whole domain.
pub fn estimate_cv<O: GradientOracle + ?Sized>(oracle: &O, states: &[Vector]) -> Result<f64> {
    let n = oracle.n();
    let mut best = 0.0f64;
    for s in states {
        let mut total = 0.0;
        for i in 0..n {
            total += oracle.statistic_variance(i, s)?;
        }
        best = best.max(2.0 * total / n as f64);
    }
    Ok(best)
}

/// How the per-index constants L_i are combined into the aggregate L.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Max,
    RootMeanSquare,
}

/// Lipschitz constants: L_i of each h_i, the aggregate L, and L_Ẇ of ∇W.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzData {
    pub per_index: Option<Vec<f64>>,
    pub l: f64,
    pub l_wdot: f64,
    pub aggregation: Aggregation,
}

impl LipschitzData {
    pub fn new(l: f64, l_wdot: f64) -> Result<Self> {
        if !(l > 0.0 && l_wdot > 0.0 && l.is_finite() && l_wdot.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Lipschitz constants must be positive (L = {l}, L_Wdot = {l_wdot})"
            )));
        }
        Ok(Self {
            per_index: None,
            l,
            l_wdot,
            aggregation: Aggregation::Max,
        })
    }

    pub fn from_per_index(per_index: Vec<f64>, l_wdot: f64, aggregation: Aggregation) -> Result<Self> {
        if per_index.is_empty() || per_index.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument(
                "per-index Lipschitz constants must be positive".into(),
            ));
        }
        let l = match aggregation {
            Aggregation::Max => per_index.iter().copied().fold(0.0, f64::max),
            Aggregation::RootMeanSquare => {
                (per_index.iter().map(|x| x * x).sum::<f64>() / per_index.len() as f64).sqrt()
            }
        };
        let mut out = Self::new(l, l_wdot)?;
        out.per_index = Some(per_index);
        out.aggregation = aggregation;
        Ok(out)
    }
}
