//! The 3P-SPIDER engine.
//!
//! Each outer loop `t` refreshes the control variate S_{t,0} ≈ h(Ŝ_{t,−1}),
//! applies the transition prox with step γ_{t,0}, then runs `k_in` inner
//! steps. Inner step k+1 draws a minibatch B, evaluates ĥ_i at both Ŝ_{t,k}
//! and Ŝ_{t,k−1} for i ∈ B, updates
//!
//! ```text
//! S_{t,k+1}   = S_{t,k} + b⁻¹ Σ_{i∈B} (ĥ_i^{t,k} − ĥ_i^{t,k−1})
//! Ŝ_{t,k+1}   = Prox_{B(Ŝ_{t,k}), γ g}(Ŝ_{t,k} + γ S_{t,k+1})
//! ```
//!
//! All randomness comes from per-coordinate streams (see [`crate::rng`]), so a
//! run is a pure function of its configuration.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::oracle::{mean_field, GradientOracle, LipschitzData, MinibatchSampler, SamplingMode};
use crate::prox::{project_domain, prox_fixed_point_residual, weighted_prox, Preconditioner, Regularizer, Vector};
use crate::rng::{self, Purpose};

/// Inner step size γ_{t,k}, k ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSize {
    Constant(f64),
    /// γ⋆ from the spectral bounds of the preconditioner and these constants.
    GammaStar(LipschitzData),
}

/// Piecewise-constant Monte Carlo budget keyed by the outer index t (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MSchedule {
    segments: Vec<(usize, usize)>,
}

impl MSchedule {
    pub fn constant(m: usize) -> Self {
        Self {
            segments: vec![(1, m.max(1))],
        }
    }

    /// `segments[j] = (first_t, m)`; the first segment must start at t = 1 and
    /// starts must increase.
    pub fn piecewise(segments: Vec<(usize, usize)>) -> Result<Self> {
        if segments.first().map(|s| s.0) != Some(1) {
            return Err(Error::InvalidArgument(
                "m schedule must start at outer index 1".into(),
            ));
        }
        if segments.windows(2).any(|w| w[1].0 <= w[0].0) || segments.iter().any(|s| s.1 == 0) {
            return Err(Error::InvalidArgument(
                "m schedule needs increasing starts and positive budgets".into(),
            ));
        }
        Ok(Self { segments })
    }

    pub fn at(&self, t: usize) -> usize {
        self.segments
            .iter()
            .take_while(|(start, _)| *start <= t)
            .last()
            .map(|s| s.1)
            .unwrap_or(self.segments[0].1)
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn is_constant(&self) -> bool {
        self.segments.len() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Refresh {
    #[default]
    Full,
    /// Refresh from a fresh batch of size b′ instead of all n indices.
    Subsampled(usize),
}

/// Whether ĥ_i is a Monte Carlo estimate or the exact h_i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Evaluation {
    #[default]
    MonteCarlo,
    Exact,
}

/// Where the exact stationarity measure Δ_{t,k} is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExactDelta {
    /// Every `stride` cumulative inner steps.
    pub stride: Option<usize>,
    /// At the pre-drawn stop time.
    pub at_stop: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub k_out: usize,
    pub k_in: usize,
    pub b: usize,
    pub step: StepSize,
    /// γ_{t,0}, the step of the transition prox.
    pub gamma_t0: f64,
    pub m: MSchedule,
    pub refresh: Refresh,
    pub sampling: SamplingMode,
    pub evaluation: Evaluation,
    pub seed: u64,
    /// Ŝ_init; `None` projects 0 onto dom g.
    pub init: Option<Vector>,
    pub exact_delta: ExactDelta,
    pub record_wall_clock: bool,
}

impl RunConfig {
    pub fn new(k_out: usize, k_in: usize, b: usize, step: StepSize, m: MSchedule) -> Self {
        Self {
            k_out,
            k_in,
            b,
            step,
            gamma_t0: 0.0,
            m,
            refresh: Refresh::Full,
            sampling: SamplingMode::WithReplacement,
            evaluation: Evaluation::MonteCarlo,
            seed: 0,
            init: None,
            exact_delta: ExactDelta::default(),
            record_wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_out == 0 || self.k_in == 0 || self.b == 0 {
            return Err(Error::InvalidArgument(format!(
                "k_out, k_in and b must be positive (got {}, {}, {})",
                self.k_out, self.k_in, self.b
            )));
        }
        if !(self.gamma_t0 >= 0.0 && self.gamma_t0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma_t0 must be nonnegative, got {}",
                self.gamma_t0
            )));
        }
        if let StepSize::Constant(g) = self.step {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::InvalidArgument(format!("step size must be positive, got {g}")));
            }
        }
        if let Refresh::Subsampled(0) = self.refresh {
            return Err(Error::InvalidArgument("refresh batch must be positive".into()));
        }
        if self.exact_delta.stride == Some(0) {
            return Err(Error::InvalidArgument("exact-delta stride must be positive".into()));
        }
        Ok(())
    }

    /// Resolved inner step γ.
    pub fn gamma(&self, precond: &Preconditioner) -> Result<f64> {
        match &self.step {
            StepSize::Constant(g) => Ok(*g),
            StepSize::GammaStar(lip) => gamma_star(
                precond.v_min(),
                precond.v_max(),
                lip.l_wdot,
                lip.l,
                self.k_in,
                self.b,
            ),
        }
    }
}

/// γ⋆ = v_min / (L_Ẇ + 2 L v_max √k_in / √b).
pub fn gamma_star(v_min: f64, v_max: f64, l_wdot: f64, l: f64, k_in: usize, b: usize) -> Result<f64> {
    if !(v_min > 0.0 && v_max > 0.0 && l_wdot > 0.0 && l >= 0.0 && k_in > 0 && b > 0) {
        return Err(Error::InvalidArgument(format!(
            "gamma_star needs positive inputs (v_min {v_min}, v_max {v_max}, L_Wdot {l_wdot}, L {l}, k_in {k_in}, b {b})"
        )));
    }
    Ok(v_min / (l_wdot + 2.0 * l * v_max * (k_in as f64).sqrt() / (b as f64).sqrt()))
}

/// N_P, N_A, N_MC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub prox_calls: u64,
    pub approximations: u64,
    pub mc_draws: u64,
}

impl Counters {
    fn evals(&mut self, count: usize, m: usize, evaluation: Evaluation) {
        self.approximations += count as u64;
        if evaluation == Evaluation::MonteCarlo {
            self.mc_draws += (count * m) as u64;
        }
    }
}

/// Closed forms for a full-refresh run with constant m:
/// N_P = k_out(k_in + 1), N_A = k_out(n + 2b·k_in), N_MC = m·N_A.
pub fn counters_closed_form(k_out: usize, k_in: usize, b: usize, n: usize, m: usize) -> Counters {
    let approximations = (k_out * (n + 2 * b * k_in)) as u64;
    Counters {
        prox_calls: (k_out * (k_in + 1)) as u64,
        approximations,
        mc_draws: m as u64 * approximations,
    }
}

/// (τ, K) uniform on {1..k_out} × {0..k_in}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopTime {
    pub tau: usize,
    pub k: usize,
}

pub fn draw_stop_time<R: Rng + ?Sized>(k_out: usize, k_in: usize, rng: &mut R) -> Result<StopTime> {
    if k_out == 0 {
        return Err(Error::InvalidArgument("k_out must be positive".into()));
    }
    Ok(StopTime {
        tau: rng.random_range(1..=k_out),
        k: rng.random_range(0..=k_in),
    })
}

/// Parameter plan b = k_in = ⌈√n⌉, k_out = ⌈1/(√n ε)⌉, m = ⌈1/ε⌉.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plan {
    pub b: usize,
    pub k_in: usize,
    pub k_out: usize,
    pub m: usize,
    pub predicted: Counters,
}

// Ceiling that ignores relative rounding noise below 1e-9, so that
// e.g. 1/ε with ε = 1 − 1e-12 plans one outer loop.
fn ceil_tol(x: f64) -> usize {
    ((x * (1.0 - 1e-9)).ceil() as usize).max(1)
}

pub fn plan_complexity(n: usize, epsilon: f64) -> Result<Plan> {
    if n == 0 || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "plan needs n >= 1 and 0 < epsilon < 1 (n = {n}, epsilon = {epsilon})"
        )));
    }
    let root = (n as f64).sqrt();
    let b = ceil_tol(root);
    let k_out = ceil_tol(1.0 / (root * epsilon));
    let m = ceil_tol(1.0 / epsilon);
    Ok(Plan {
        b,
        k_in: b,
        k_out,
        m,
        predicted: counters_closed_form(k_out, b, b, n, m),
    })
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub k: usize,
    /// Ŝ_{t,k}
    pub state: Vector,
    /// S_{t,k}
    pub control: Vector,
    /// b⁻¹ Σ (ĥ_i^{t,k−1} − ĥ_i^{t,k−2}) for k ≥ 1.
    pub increment: Option<Vector>,
    /// Δ̂_{t,k}
    pub delta_hat: f64,
    pub delta_exact: Option<f64>,
    pub gamma: f64,
    pub m: usize,
    pub counters: Counters,
    pub wall_ms: f64,
}

impl StepRecord {
    /// (t − 1)·k_in + k
    pub fn cumulative(&self, k_in: usize) -> usize {
        (self.t - 1) * k_in + self.k
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub k_out: usize,
    pub k_in: usize,
    /// Inner step size γ.
    pub gamma: f64,
    /// One record per (t, k), t = 1..k_out, k = 0..k_in.
    pub records: Vec<StepRecord>,
    /// Ŝ_{t,−1} for t = 1..k_out.
    pub anchors: Vec<Vector>,
    pub stop_time: Option<StopTime>,
    pub counters: Counters,
    pub final_objective: Option<f64>,
}

impl Trajectory {
    pub fn record(&self, t: usize, k: usize) -> Option<&StepRecord> {
        if t == 0 || t > self.k_out || k > self.k_in {
            return None;
        }
        self.records.get((t - 1) * (self.k_in + 1) + k)
    }

    /// Ŝ_{t,k−1}; for k = 0 this is the anchor Ŝ_{t,−1}.
    pub fn previous_state(&self, t: usize, k: usize) -> Option<&Vector> {
        if k == 0 {
            self.anchors.get(t.checked_sub(1)?)
        } else {
            self.record(t, k - 1).map(|r| &r.state)
        }
    }

    pub fn stop_record(&self) -> Option<&StepRecord> {
        self.stop_time.and_then(|st| self.record(st.tau, st.k))
    }

    pub fn final_state(&self) -> Option<&Vector> {
        self.records.last().map(|r| &r.state)
    }

    /// Records at the end of each outer loop (k = k_in).
    pub fn epoch_ends(&self) -> impl Iterator<Item = &StepRecord> {
        let k_in = self.k_in;
        self.records.iter().filter(move |r| r.k == k_in)
    }
}

fn check_finite(v: &Vector, t: usize, k: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            t,
            k,
            detail: format!("{what} = {v}"),
        })
    }
}

struct Evaluator<'a, O: ?Sized> {
    oracle: &'a O,
    evaluation: Evaluation,
    seed: u64,
}

impl<O: GradientOracle + ?Sized> Evaluator<'_, O> {
    fn eval(&self, i: usize, s: &Vector, m: usize, key: (Purpose, u64, u64, u64)) -> Result<Vector> {
        match self.evaluation {
            Evaluation::Exact => self.oracle.eval_exact(i, s),
            Evaluation::MonteCarlo => {
                let mut rng = rng::stream(self.seed, key.0, key.1, key.2, key.3);
                self.oracle.eval_mc(i, s, m, &mut rng)
            }
        }
    }
}

fn batch_key(j: usize, i: usize) -> u64 {
    ((j as u64) << 32) | i as u64
}

/// Runs 3P-SPIDER.
pub fn run_3p_spider<O: GradientOracle + ?Sized>(
    config: &RunConfig,
    oracle: &O,
    precond: &Preconditioner,
    reg: &Regularizer,
) -> Result<Trajectory> {
    config.validate()?;
    let n = oracle.n();
    let q = oracle.dim();
    if precond.dim() != q {
        return Err(Error::InvalidArgument(format!(
            "preconditioner dimension {} does not match oracle dimension {q}",
            precond.dim()
        )));
    }
    match config.evaluation {
        Evaluation::MonteCarlo if !oracle.has_mc() => return Err(Error::MissingCapability("monte carlo")),
        Evaluation::Exact if !oracle.has_exact() => return Err(Error::MissingCapability("exact")),
        _ => {}
    }
    let gamma = config.gamma(precond)?;
    let sampler = MinibatchSampler::new(n, config.b, config.sampling)?;
    let refresh_sampler = match config.refresh {
        Refresh::Full => None,
        Refresh::Subsampled(bp) => Some(MinibatchSampler::new(n, bp, config.sampling)?),
    };

    let stop_time = draw_stop_time(
        config.k_out,
        config.k_in,
        &mut rng::stream(config.seed, Purpose::StopTime, 0, 0, 0),
    )?;

    let mut state = match &config.init {
        Some(s) => {
            if s.len() != q {
                return Err(Error::InvalidArgument(format!(
                    "initial point has dimension {}, expected {q}",
                    s.len()
                )));
            }
            s.clone()
        }
        None => project_domain(precond, reg, &Vector::zeros(q))?,
    };
    check_finite(&state, 1, 0, "initial point")?;
    if !reg.value(&state).is_finite() {
        return Err(Error::InvalidArgument("initial point is outside dom g".into()));
    }

    let ev = Evaluator {
        oracle,
        evaluation: config.evaluation,
        seed: config.seed,
    };
    let exact_delta = |t: usize, k: usize, prev: &Vector, cur: &Vector, step: f64| -> Result<Option<f64>> {
        if !oracle.has_exact() {
            return Ok(None);
        }
        let cumulative = (t - 1) * config.k_in + k;
        let wanted = (config.exact_delta.at_stop && stop_time == StopTime { tau: t, k })
            || config.exact_delta.stride.is_some_and(|s| cumulative.is_multiple_of(s));
        if !wanted {
            return Ok(None);
        }
        // γ_{t,0} = 0 leaves Δ_{t,0} undefined; evaluate it with the inner step.
        let step = if step > 0.0 { step } else { gamma };
        prox_fixed_point_residual(prev, cur, step, |s| mean_field(oracle, s), precond, reg).map(Some)
    };

    let started = Instant::now();
    let wall = || {
        if config.record_wall_clock {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };

    let mut counters = Counters::default();
    let mut records = Vec::with_capacity(config.k_out * (config.k_in + 1));
    let mut anchors = Vec::with_capacity(config.k_out);

    for t in 1..=config.k_out {
        let m = config.m.at(t);
        let anchor = state.clone();

        // Refresh of the control variate at Ŝ_{t,−1}.
        let mut control = Vector::zeros(q);
        match &refresh_sampler {
            None => {
                for i in 0..n {
                    let h = ev
                        .eval(i, &anchor, m, (Purpose::Refresh, t as u64, i as u64, 0))
                        .map_err(|e| e.at(t, 0, i))?;
                    control += h;
                }
                control /= n as f64;
                counters.evals(n, m, config.evaluation);
            }
            Some(rs) => {
                let batch = rs.sample(&mut rng::stream(config.seed, Purpose::Minibatch, t as u64, u64::MAX, 0));
                for (j, &i) in batch.iter().enumerate() {
                    let h = ev
                        .eval(i, &anchor, m, (Purpose::Refresh, t as u64, batch_key(j, i), 1))
                        .map_err(|e| e.at(t, 0, i))?;
                    control += h;
                }
                control /= batch.len() as f64;
                counters.evals(batch.len(), m, config.evaluation);
            }
        }
        check_finite(&control, t, 0, "refreshed control variate")?;

        // Transition prox with γ_{t,0}.
        let g0 = config.gamma_t0;
        state = weighted_prox(&precond.at(&anchor), g0, reg, &(&anchor + &control * g0))?;
        counters.prox_calls += 1;
        check_finite(&state, t, 0, "iterate")?;
        let moved = (&state - &anchor).norm_squared();
        let delta_hat = if g0 > 0.0 {
            moved / (g0 * g0)
        } else if moved <= 1e-18 * (1.0 + anchor.norm_squared()) {
            0.0
        } else {
            return Err(Error::NonFinite {
                t,
                k: 0,
                detail: format!("transition with zero step moved the iterate by {:e}", moved.sqrt()),
            });
        };
        records.push(StepRecord {
            t,
            k: 0,
            delta_exact: exact_delta(t, 0, &anchor, &state, g0)?,
            state: state.clone(),
            control: control.clone(),
            increment: None,
            delta_hat,
            gamma: g0,
            m,
            counters,
            wall_ms: wall(),
        });
        anchors.push(anchor.clone());

        let mut prev = anchor;
        for k in 0..config.k_in {
            let batch = sampler.sample(&mut rng::stream(config.seed, Purpose::Minibatch, t as u64, k as u64, 0));
            let mut increment = Vector::zeros(q);
            for (j, &i) in batch.iter().enumerate() {
                let key = batch_key(j, i);
                let cur_h = ev
                    .eval(i, &state, m, (Purpose::Current, t as u64, k as u64, key))
                    .map_err(|e| e.at(t, k + 1, i))?;
                let prev_h = ev
                    .eval(i, &prev, m, (Purpose::Previous, t as u64, k as u64, key))
                    .map_err(|e| e.at(t, k + 1, i))?;
                increment += cur_h - prev_h;
            }
            increment /= batch.len() as f64;
            counters.evals(2 * batch.len(), m, config.evaluation);
            control += &increment;
            check_finite(&control, t, k + 1, "control variate")?;

            let half = &state + &control * gamma;
            let next = weighted_prox(&precond.at(&state), gamma, reg, &half)?;
            counters.prox_calls += 1;
            check_finite(&next, t, k + 1, "iterate")?;
            let delta_hat = (&next - &state).norm_squared() / (gamma * gamma);
            records.push(StepRecord {
                t,
                k: k + 1,
                delta_exact: exact_delta(t, k + 1, &state, &next, gamma)?,
                state: next.clone(),
                control: control.clone(),
                increment: Some(increment),
                delta_hat,
                gamma,
                m,
                counters,
                wall_ms: wall(),
            });
            prev = std::mem::replace(&mut state, next);
        }
    }

    Ok(Trajectory {
        k_out: config.k_out,
        k_in: config.k_in,
        gamma,
        records,
        anchors,
        stop_time: Some(stop_time),
        counters,
        final_objective: None,
    })
}

/// Largest ∞-norm gap between S_{t,k} and S_{t,0} plus the recorded
/// increments, over all (t, k).
pub fn telescoping_residual(traj: &Trajectory) -> f64 {
    let mut worst = 0.0f64;
    for t in 1..=traj.k_out {
        let Some(base) = traj.record(t, 0) else { continue };
        let mut sum = base.control.clone();
        for k in 1..=traj.k_in {
            let Some(rec) = traj.record(t, k) else { break };
            if let Some(inc) = &rec.increment {
                sum += inc;
            }
            worst = worst.max((&rec.control - &sum).amax());
        }
    }
    worst
}

/// Largest ∞-norm gap between S_{t,k} and the exact mean field h(Ŝ_{t,k−1}).
/// Zero up to rounding for exact-oracle, full-batch runs.
pub fn control_variate_tracking_error<O: GradientOracle + ?Sized>(traj: &Trajectory, oracle: &O) -> Result<f64> {
    let mut worst = 0.0f64;
    for rec in &traj.records {
        if rec.k == 0 {
            continue;
        }
        let prev = traj.previous_state(rec.t, rec.k).expect("record has a predecessor");
        worst = worst.max((&rec.control - mean_field(oracle, prev)?).amax());
    }
    Ok(worst)
}

/// Constants entering the stop-time bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub v_min: f64,
    pub v_max: f64,
    pub l_wdot: f64,
    pub l: f64,
    pub c_v: f64,
    /// W(Ŝ_init) + g(Ŝ_init) − min(W + g).
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopTimeBounds {
    /// Bound on E[‖Ŝ_{τ,K} − Ŝ_{τ,K−1}‖² / γ⋆²].
    pub step: f64,
    /// Bound on E[Δ_{τ,K}].
    pub delta: f64,
    /// E[(k_in − K) / m_{τ,K+1}]
    pub budget_next: f64,
    /// E[(k_in − K) / m_{τ,K}]
    pub budget_same: f64,
    pub gamma_star: f64,
}

/// How the second bound groups its terms: the brace factor multiplies the
/// step-length expectation only, and the variance term is added separately.
pub const DELTA_BOUND_READING: &str =
    "delta bound: {..}^-1 (1/L + (vmax/vmin)^2 gamma* sqrt(kin/b)) multiplies the step term only; variance term added separately";

/// Right-hand sides of the stop-time bounds, divided by their left-hand
/// multipliers. Refuses configurations outside the bound's hypotheses.
pub fn stop_time_rhs(config: &RunConfig, consts: &BoundConstants) -> Result<StopTimeBounds> {
    if config.refresh != Refresh::Full {
        return Err(Error::Hypotheses("subsampled refresh (nonzero refresh error)".into()));
    }
    if config.gamma_t0 != 0.0 {
        return Err(Error::Hypotheses("gamma_t0 must be 0".into()));
    }
    if !matches!(config.step, StepSize::GammaStar(_)) {
        return Err(Error::Hypotheses("inner step must be gamma_star".into()));
    }
    let BoundConstants {
        v_min,
        v_max,
        l_wdot,
        l,
        c_v,
        gap,
    } = *consts;
    if !(v_min > 0.0 && v_max >= v_min && l_wdot > 0.0 && l > 0.0 && c_v >= 0.0 && gap >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid bound constants {consts:?}")));
    }
    let (k_out, k_in, b) = (config.k_out, config.k_in, config.b);
    let ratio = (k_in as f64 / b as f64).sqrt();
    let gs = gamma_star(v_min, v_max, l_wdot, l, k_in, b)?;

    // Exact averages over the uniform (τ, K) grid. The schedule is keyed by
    // the outer index, so m_{τ,K+1} = m_{τ,K} = m_τ.
    let cells = (k_out * (k_in + 1)) as f64;
    let mut budget = 0.0;
    for t in 1..=k_out {
        let m = config.m.at(t) as f64;
        budget += (0..=k_in).map(|kk| (k_in - kk) as f64 / m).sum::<f64>();
    }
    budget /= cells;

    let lead = l_wdot + 2.0 * l * v_max * ratio;
    let step_rhs = gap / cells + c_v * v_max / (2.0 * l) / ((k_in * b) as f64).sqrt() * budget;
    let step = step_rhs * 2.0 * lead / (v_min * v_min);

    let cond = (v_max / v_min).powi(2);
    let brace = l_wdot / (l * v_min) + 2.0 * (v_max / v_min) * ratio;
    let delta_rhs = (1.0 / l + cond * gs * ratio) / brace * step
        + cond * c_v / l / ((b * k_in) as f64).sqrt() * budget;
    let delta = delta_rhs * (2.0 / v_min * lead + l * ratio);

    Ok(StopTimeBounds {
        step,
        delta,
        budget_next: budget,
        budget_same: budget,
        gamma_star: gs,
    })
}
