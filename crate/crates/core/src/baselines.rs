//! Reference algorithms: Prox-Online-EM (no variance reduction) and the
//! deterministic full-batch preconditioned prox-gradient iteration.
//!
//! Both return a [`Trajectory`] with `k_in = 1`: record `(t, 1)` holds the
//! iterate after step t and `(t, 0)` the one before it.

use crate::error::{Error, Result};
use crate::oracle::{mean_field, GradientOracle, MinibatchSampler, SamplingMode};
use crate::prox::{project_domain, weighted_prox, Preconditioner, Regularizer, Vector};
use crate::rng::{self, Purpose};
use crate::spider::{Counters, Evaluation, StepRecord, Trajectory};

/// Step schedule of Prox-Online-EM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OnlineStep {
    Constant(f64),
    /// γ_t = γ₀ / t
    Decay(f64),
}

impl OnlineStep {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            OnlineStep::Constant(g) => g,
            OnlineStep::Decay(g0) => g0 / t as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OnlineConfig {
    pub iterations: usize,
    pub b: usize,
    pub step: OnlineStep,
    pub m: usize,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub evaluation: Evaluation,
    pub init: Option<Vector>,
}

impl OnlineConfig {
    pub fn new(iterations: usize, b: usize, step: OnlineStep, m: usize) -> Self {
        Self {
            iterations,
            b,
            step,
            m,
            seed: 0,
            sampling: SamplingMode::WithReplacement,
            evaluation: Evaluation::MonteCarlo,
            init: None,
        }
    }
}

fn start<O: GradientOracle + ?Sized>(
    init: &Option<Vector>,
    oracle: &O,
    precond: &Preconditioner,
    reg: &Regularizer,
) -> Result<Vector> {
    let q = oracle.dim();
    let s = match init {
        Some(s) if s.len() == q => s.clone(),
        Some(s) => {
            return Err(Error::InvalidArgument(format!(
                "initial point has dimension {}, expected {q}",
                s.len()
            )))
        }
        None => project_domain(precond, reg, &Vector::zeros(q))?,
    };
    if !reg.value(&s).is_finite() {
        return Err(Error::InvalidArgument("initial point is outside dom g".into()));
    }
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn push_step(
    records: &mut Vec<StepRecord>,
    t: usize,
    prev: &Vector,
    next: &Vector,
    field: Vector,
    gamma: f64,
    m: usize,
    before: Counters,
    after: Counters,
) {
    records.push(StepRecord {
        t,
        k: 0,
        state: prev.clone(),
        control: field.clone(),
        increment: None,
        delta_hat: 0.0,
        delta_exact: None,
        gamma: 0.0,
        m,
        counters: before,
        wall_ms: 0.0,
    });
    records.push(StepRecord {
        t,
        k: 1,
        state: next.clone(),
        control: field,
        increment: None,
        delta_hat: (next - prev).norm_squared() / (gamma * gamma),
        delta_exact: None,
        gamma,
        m,
        counters: after,
        wall_ms: 0.0,
    });
}

/// Ŝ_{t+1} = Prox_{B(Ŝ_t), γ_{t+1} g}(Ŝ_t + γ_{t+1} b⁻¹ Σ_{i∈B_{t+1}} ĥ_i(Ŝ_t)).
pub fn run_prox_online_em<O: GradientOracle + ?Sized>(
    config: &OnlineConfig,
    oracle: &O,
    precond: &Preconditioner,
    reg: &Regularizer,
) -> Result<Trajectory> {
    if config.iterations == 0 || config.m == 0 {
        return Err(Error::InvalidArgument("iterations and m must be positive".into()));
    }
    let (OnlineStep::Constant(g) | OnlineStep::Decay(g)) = config.step;
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {g}")));
    }
    match config.evaluation {
        Evaluation::MonteCarlo if !oracle.has_mc() => return Err(Error::MissingCapability("monte carlo")),
        Evaluation::Exact if !oracle.has_exact() => return Err(Error::MissingCapability("exact")),
        _ => {}
    }
    let sampler = MinibatchSampler::new(oracle.n(), config.b, config.sampling)?;
    let mut state = start(&config.init, oracle, precond, reg)?;
    let q = oracle.dim();
    let mut counters = Counters::default();
    let mut records = Vec::with_capacity(2 * config.iterations);
    let mut anchors = Vec::with_capacity(config.iterations);

    for t in 1..=config.iterations {
        let gamma = config.step.at(t);
        let before = counters;
        let batch = sampler.sample(&mut rng::stream(config.seed, Purpose::Minibatch, t as u64, 0, 0));
        let mut field = Vector::zeros(q);
        for (j, &i) in batch.iter().enumerate() {
            let h = match config.evaluation {
                Evaluation::Exact => oracle.eval_exact(i, &state),
                Evaluation::MonteCarlo => {
                    let mut r = rng::stream(config.seed, Purpose::Online, t as u64, j as u64, i as u64);
                    oracle.eval_mc(i, &state, config.m, &mut r)
                }
            }
            .map_err(|e| e.at(t, 1, i))?;
            field += h;
        }
        field /= batch.len() as f64;
        counters.approximations += batch.len() as u64;
        if config.evaluation == Evaluation::MonteCarlo {
            counters.mc_draws += (batch.len() * config.m) as u64;
        }
        let next = weighted_prox(&precond.at(&state), gamma, reg, &(&state + &field * gamma))?;
        counters.prox_calls += 1;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                t,
                k: 1,
                detail: format!("iterate = {next}"),
            });
        }
        anchors.push(state.clone());
        push_step(&mut records, t, &state, &next, field, gamma, config.m, before, counters);
        state = next;
    }

    Ok(Trajectory {
        k_out: config.iterations,
        k_in: 1,
        gamma: config.step.at(config.iterations),
        records,
        anchors,
        stop_time: None,
        counters,
        final_objective: None,
    })
}

#[derive(Debug, Clone)]
pub struct FullGradientConfig {
    pub iterations: usize,
    pub gamma: f64,
    pub init: Option<Vector>,
    /// Stop early once Δ̂ falls below this value.
    pub tol: Option<f64>,
}

/// Ŝ_{t+1} = Prox_{B(Ŝ_t), γ g}(Ŝ_t + γ h(Ŝ_t)) with the exact mean field.
/// `objective`, when given, is evaluated at the final iterate.
pub fn run_full_prox_gradient<O, F>(
    config: &FullGradientConfig,
    oracle: &O,
    precond: &Preconditioner,
    reg: &Regularizer,
    objective: Option<F>,
) -> Result<Trajectory>
where
    O: GradientOracle + ?Sized,
    F: FnOnce(&Vector) -> Result<f64>,
{
    if !oracle.has_exact() {
        return Err(Error::MissingCapability("exact"));
    }
    if config.iterations == 0 || !(config.gamma > 0.0) {
        return Err(Error::InvalidArgument(
            "full prox-gradient needs positive iterations and step".into(),
        ));
    }
    let mut state = start(&config.init, oracle, precond, reg)?;
    let n = oracle.n();
    let gamma = config.gamma;
    let mut counters = Counters::default();
    let mut records = Vec::new();
    let mut anchors = Vec::new();
    for t in 1..=config.iterations {
        let before = counters;
        let field = mean_field(oracle, &state)?;
        counters.approximations += n as u64;
        let next = weighted_prox(&precond.at(&state), gamma, reg, &(&state + &field * gamma))?;
        counters.prox_calls += 1;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                t,
                k: 1,
                detail: format!("iterate = {next}"),
            });
        }
        anchors.push(state.clone());
        push_step(&mut records, t, &state, &next, field, gamma, 0, before, counters);
        state = next;
        let dh = records.last().map(|r| r.delta_hat).unwrap_or(f64::INFINITY);
        if config.tol.is_some_and(|tol| dh <= tol) {
            break;
        }
    }
    let final_objective = match objective {
        Some(f) => Some(f(&state)?),
        None => None,
    };
    Ok(Trajectory {
        k_out: anchors.len(),
        k_in: 1,
        gamma,
        records,
        anchors,
        stop_time: None,
        counters,
        final_objective,
    })
}
