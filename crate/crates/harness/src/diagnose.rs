//! Self-checks of a configured problem: η law, gradient identity, prox,
//! telescoping, counters and the stop-time bounds.

use std::fmt;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use spider3p::baselines::{run_full_prox_gradient, FullGradientConfig};
use spider3p::oracle::{estimate_cv, eta_error, mean_field, Draws, GradientOracle, MinibatchSampler};
use spider3p::prox::{project_domain, weighted_prox, Ellipsoid};
use spider3p::rng::{self, Purpose};
use spider3p::spider::{
    run_3p_spider, telescoping_residual, stop_time_rhs, Evaluation, Refresh, RunConfig, StepSize, BoundConstants,
};
use spider3p::{Matrix, Preconditioner, Regularizer, Vector};

use crate::experiment::mean_se;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self {
            name,
            status: if pass { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    fn skip(name: &'static str, why: impl Into<String>) -> Self {
        Self {
            name,
            status: Status::Skip,
            detail: why.into(),
        }
    }

    fn error(name: &'static str, e: impl fmt::Display) -> Self {
        Self {
            name,
            status: Status::Fail,
            detail: format!("error: {e}"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| c.status == Status::Fail).count()
    }

    pub fn status(&self, name: &str) -> Option<Status> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.status)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{:<4}  {:<20}  {}", c.status, c.name, c.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    /// Replications per η estimate.
    pub reps: usize,
    pub m_grid: Vec<usize>,
    pub fd_points: usize,
    pub prox_instances: usize,
    /// Independent runs, each contributing one stop-time draw.
    pub bound_draws: usize,
    /// Iterations of the deterministic run behind the min(W + g) surrogate.
    pub surrogate_iterations: usize,
    pub seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            reps: 2000,
            m_grid: vec![4, 16, 64],
            fd_points: 5,
            prox_instances: 20,
            bound_draws: 20,
            surrogate_iterations: 5000,
            seed: 1,
        }
    }
}

pub type Objective<'a> = &'a (dyn Fn(&Vector) -> spider3p::Result<f64> + Sync);

/// What is being diagnosed: an oracle with its geometry, an optional
/// objective W + g evaluator and the run configuration to exercise.
pub struct Subject<'a, O: ?Sized> {
    pub oracle: &'a O,
    pub precond: &'a Preconditioner,
    pub reg: &'a Regularizer,
    pub objective: Option<Objective<'a>>,
    pub run: &'a RunConfig,
}

pub const CHECKS: [&str; 7] = [
    "eta-unbiased",
    "eta-variance",
    "gradient-identity",
    "prox-brute-force",
    "telescoping",
    "counters",
    "stop-time-bounds",
];

pub fn diagnose<O: GradientOracle + ?Sized>(subject: &Subject<'_, O>, settings: &Settings) -> Report {
    let pair = states(subject);
    let mut checks = vec![
        eta_unbiased(subject, settings, &pair),
        eta_variance(subject, settings, &pair),
        gradient_identity(subject, settings, &pair),
        prox_brute_force(subject, settings),
    ];
    match run_3p_spider(&with_seed(subject.run, settings.seed), subject.oracle, subject.precond, subject.reg) {
        Ok(traj) => {
            let resid = telescoping_residual(&traj);
            let scale = traj.records.iter().map(|r| r.control.amax()).fold(1.0, f64::max);
            checks.push(Check::new(
                "telescoping",
                resid <= 1e-10 * scale,
                format!("max |S_tk - S_t0 - sum of increments| = {resid:.3e} (scale {scale:.3e})"),
            ));
            checks.push(counters(subject, &traj));
        }
        Err(e) => {
            checks.push(Check::error("telescoping", &e));
            checks.push(Check::error("counters", &e));
        }
    }
    checks.push(stop_time_bounds(subject, settings));
    Report { checks }
}

fn with_seed(run: &RunConfig, seed: u64) -> RunConfig {
    let mut r = run.clone();
    r.seed = seed;
    r
}

/// Ŝ_init and one exact prox-gradient step from it.
fn states<O: GradientOracle + ?Sized>(subject: &Subject<'_, O>) -> spider3p::Result<(Vector, Vector)> {
    let q = subject.oracle.dim();
    let start = match &subject.run.init {
        Some(s) => s.clone(),
        None => project_domain(subject.precond, subject.reg, &Vector::zeros(q))?,
    };
    if !subject.oracle.has_exact() {
        return Ok((start.clone(), start));
    }
    let gamma = subject.run.gamma(subject.precond)?;
    let h = mean_field(subject.oracle, &start)?;
    let next = weighted_prox(&subject.precond.at(&start), gamma, subject.reg, &(&start + h * gamma))?;
    Ok((start, next))
}

type Pair = spider3p::Result<(Vector, Vector)>;

fn eta_samples<O: GradientOracle + ?Sized>(
    subject: &Subject<'_, O>,
    settings: &Settings,
    (prev, curr): &(Vector, Vector),
    m: usize,
    stream: u64,
) -> spider3p::Result<Vec<Vector>> {
    let oracle = subject.oracle;
    let sampler = MinibatchSampler::new(oracle.n(), subject.run.b, subject.run.sampling)?;
    (0..settings.reps)
        .map(|j| {
            let batch = sampler.sample(&mut rng::stream(settings.seed, Purpose::Minibatch, u64::MAX - stream, j as u64, 0));
            let tag = (stream << 32) | j as u64;
            eta_error(oracle, &batch, curr, prev, m, settings.seed, tag, Draws::Independent)
        })
        .collect()
}

fn needs_both<O: GradientOracle + ?Sized>(oracle: &O) -> Option<&'static str> {
    if !oracle.has_exact() {
        Some("oracle has no exact capability")
    } else if !oracle.has_mc() {
        Some("oracle has no monte carlo capability")
    } else {
        None
    }
}

fn eta_unbiased<O: GradientOracle + ?Sized>(subject: &Subject<'_, O>, settings: &Settings, pair: &Pair) -> Check {
    const NAME: &str = "eta-unbiased";
    if subject.run.evaluation == Evaluation::Exact {
        return Check::new(NAME, true, "exact oracle: eta is identically 0".into());
    }
    if let Some(why) = needs_both(subject.oracle) {
        return Check::skip(NAME, why);
    }
    let pair = match pair {
        Ok(p) => p,
        Err(e) => return Check::error(NAME, e),
    };
    let m = subject.run.m.at(1);
    let etas = match eta_samples(subject, settings, pair, m, 1) {
        Ok(v) => v,
        Err(e) => return Check::error(NAME, e),
    };
    let mut worst = 0.0f64;
    let mut pass = true;
    for c in 0..subject.oracle.dim() {
        let vals: Vec<f64> = etas.iter().map(|e| e[c]).collect();
        let ms = mean_se(&vals).expect("reps > 0");
        let se = ms.se.unwrap_or(0.0);
        if se > 0.0 {
            worst = worst.max(ms.mean.abs() / se);
            pass &= ms.mean.abs() <= 4.0 * se;
        } else {
            pass &= ms.mean.abs() <= 1e-12;
        }
    }
    Check::new(
        NAME,
        pass,
        format!("max |mean|/SE = {worst:.2} over {} reps (b = {}, m = {m}), limit 4", settings.reps, subject.run.b),
    )
}

/// Least-squares slope of ys against xs.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn eta_variance<O: GradientOracle + ?Sized>(subject: &Subject<'_, O>, settings: &Settings, pair: &Pair) -> Check {
    const NAME: &str = "eta-variance";
    if subject.run.evaluation == Evaluation::Exact {
        return Check::new(NAME, true, "exact oracle: E|eta|^2 = 0 <= C_v/(bm)".into());
    }
    if let Some(why) = needs_both(subject.oracle) {
        return Check::skip(NAME, why);
    }
    let pair = match pair {
        Ok(p) => p,
        Err(e) => return Check::error(NAME, e),
    };
    let cv = match estimate_cv(subject.oracle, &[pair.0.clone(), pair.1.clone()]) {
        Ok(c) => c,
        Err(e) => return Check::skip(NAME, format!("no statistic variance: {e}")),
    };
    let b = subject.run.b as f64;
    let (mut xs, mut ys, mut parts) = (Vec::new(), Vec::new(), Vec::new());
    let mut within = true;
    for (g, &m) in settings.m_grid.iter().enumerate() {
        let etas = match eta_samples(subject, settings, pair, m, 2 + g as u64) {
            Ok(v) => v,
            Err(e) => return Check::error(NAME, e),
        };
        let sq: Vec<f64> = etas.iter().map(|e| e.norm_squared()).collect();
        let ms = mean_se(&sq).expect("reps > 0");
        let bound = cv / (b * m as f64);
        within &= ms.mean <= bound + 2.0 * ms.se.unwrap_or(0.0);
        xs.push((m as f64).ln());
        ys.push(ms.mean.ln());
        parts.push(format!("m={m}: {:.3e} (bound {bound:.3e})", ms.mean));
    }
    let s = slope(&xs, &ys);
    Check::new(
        NAME,
        within && (s + 1.0).abs() <= 0.1,
        format!("slope {s:.3} (target -1 +/- 0.1); {}", parts.join(", ")),
    )
}

fn random_feasible<O: GradientOracle + ?Sized, R: Rng>(
    subject: &Subject<'_, O>,
    base: &Vector,
    rng: &mut R,
) -> spider3p::Result<Vector> {
    let q = subject.oracle.dim();
    let scale = 0.5 * (1.0 + base.norm());
    let noise = Vector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut s = project_domain(subject.precond, subject.reg, &(base + noise * scale))?;
    // Pull strictly inside so that central differences stay in dom g.
    if let Regularizer::Ellipsoid(e) = subject.reg {
        let val = e.omega().quad_form(&s);
        if val > 0.9 * e.radius() {
            s *= (0.9 * e.radius() / val).sqrt();
        }
    }
    Ok(s)
}

/// ∇W(s) = −B(s) h(s), checked by Richardson-extrapolated central differences.
fn gradient_identity<O: GradientOracle + ?Sized>(subject: &Subject<'_, O>, settings: &Settings, pair: &Pair) -> Check {
    const NAME: &str = "gradient-identity";
    let Some(objective) = subject.objective else {
        return Check::skip(NAME, "no objective evaluator");
    };
    if !subject.oracle.has_exact() {
        return Check::skip(NAME, "oracle has no exact capability");
    }
    let base = match pair {
        Ok(p) => p.0.clone(),
        Err(e) => return Check::error(NAME, e),
    };
    let mut rng = rng::stream(settings.seed, Purpose::Diagnostic, u64::MAX, 0, 0);
    let mut worst = 0.0f64;
    let q = subject.oracle.dim();
    for _ in 0..settings.fd_points {
        let result = (|| -> spider3p::Result<f64> {
            let s = random_feasible(subject, &base, &mut rng)?;
            let grad = -(subject.precond.at(&s).into_owned() * mean_field(subject.oracle, &s)?);
            let h = 1e-5 * s.norm().max(1.0);
            let mut fd = Vector::zeros(q);
            for j in 0..q {
                let mut e = Vector::zeros(q);
                e[j] = 1.0;
                let central = |step: f64| -> spider3p::Result<f64> {
                    Ok((objective(&(&s + &e * step))? - objective(&(&s - &e * step))?) / (2.0 * step))
                };
                fd[j] = (4.0 * central(h)? - central(2.0 * h)?) / 3.0;
            }
            Ok((&fd - &grad).norm() / grad.norm().max(1e-8))
        })();
        match result {
            Ok(rel) => worst = worst.max(rel),
            Err(e) => return Check::error(NAME, e),
        }
    }
    Check::new(
        NAME,
        worst <= 1e-4,
        format!("max relative error {worst:.3e} at {} points, limit 1e-4", settings.fd_points),
    )
}

/// Minimizer of ½(x − s)ᵀB(x − s) over {x : xᵀΩx ≤ r} by projected gradient
/// in the Ω geometry, where the projection is an exact radial scaling.
pub fn projected_gradient(b: &Matrix, ellipsoid: &Ellipsoid, s: &Vector, max_iter: usize) -> Vector {
    let omega = ellipsoid.omega();
    let r = ellipsoid.radius();
    let project = |x: Vector| {
        let v = omega.quad_form(&x);
        if v <= r {
            x
        } else {
            x * (r / v).sqrt()
        }
    };
    // The Ω-preconditioned gradient Ω⁻¹B(x − s) is Lipschitz in the Ω norm
    // with constant λ_max(Ω⁻¹B).
    let m = omega.inverse() * b;
    let linv = omega.cholesky().l().try_inverse().expect("Cholesky factor is invertible");
    let lmax = SymmetricEigen::new(&linv * b * linv.transpose()).eigenvalues.max();
    let step = 1.0 / lmax;
    let mut x = project(s.clone());
    for _ in 0..max_iter {
        let next = project(&x - &m * (&x - s) * step);
        let moved = (&next - &x).amax();
        x = next;
        if moved <= 1e-17 * (1.0 + x.amax()) {
            break;
        }
    }
    x
}

/// Relative KKT residual of x for the ellipsoid projection of s under B:
/// B(x − s) + λΩx = 0 with λ ≥ 0 and λ(xᵀΩx − r) = 0.
pub fn kkt_residual(b: &Matrix, ellipsoid: &Ellipsoid, s: &Vector, x: &Vector) -> f64 {
    let omega = ellipsoid.omega();
    let g = b * (x - s);
    let scale = (b * s).norm().max(1e-300);
    let feas = (omega.quad_form(x) - ellipsoid.radius()).max(0.0) / ellipsoid.radius();
    let ox = omega.matrix() * x;
    let lambda = if ox.norm_squared() > 0.0 {
        (-g.dot(&ox) / ox.norm_squared()).max(0.0)
    } else {
        0.0
    };
    let slack = (omega.quad_form(x) - ellipsoid.radius()).abs() / ellipsoid.radius();
    let comp = if lambda * ox.norm() > 1e-9 * scale { slack } else { 0.0 };
    ((g + ox * lambda).norm() / scale).max(feas).max(comp)
}

fn prox_brute_force<O: GradientOracle + ?Sized>(subject: &Subject<'_, O>, settings: &Settings) -> Check {
    const NAME: &str = "prox-brute-force";
    let Regularizer::Ellipsoid(ell) = subject.reg else {
        return Check::skip(NAME, "regularizer is not an ellipsoid indicator");
    };
    let q = subject.oracle.dim();
    let mut rng = rng::stream(settings.seed, Purpose::Diagnostic, u64::MAX - 1, 0, 0);
    let (mut worst, mut worst_kkt) = (0.0f64, 0.0f64);
    for i in 0..settings.prox_instances {
        let dir = Vector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let level: f64 = rng.random_range(0.25..4.0);
        let s = &dir * (level * ell.radius() / ell.omega().quad_form(&dir)).sqrt();
        let b = subject.precond.at(&s).into_owned();
        let gamma = rng.random_range(0.01..1.0);
        let fast = match weighted_prox(&b, gamma, subject.reg, &s) {
            Ok(x) => x,
            Err(e) => return Check::error(NAME, format!("instance {i}: {e}")),
        };
        let brute = projected_gradient(&b, ell, &s, 200_000);
        worst = worst.max((&fast - &brute).amax() / (1.0 + s.amax()));
        worst_kkt = worst_kkt.max(kkt_residual(&b, ell, &s, &fast));
    }
    Check::new(
        NAME,
        worst <= 1e-6 && worst_kkt <= 1e-7,
        format!(
            "max deviation {worst:.2e} (limit 1e-6), max KKT residual {worst_kkt:.2e} (limit 1e-7), {} instances",
            settings.prox_instances
        ),
    )
}

fn counters<O: GradientOracle + ?Sized>(subject: &Subject<'_, O>, traj: &spider3p::Trajectory) -> Check {
    const NAME: &str = "counters";
    let run = subject.run;
    let refresh = match run.refresh {
        Refresh::Full => subject.oracle.n(),
        Refresh::Subsampled(bp) => bp,
    } as u64;
    let (k_in, b) = (run.k_in as u64, run.b as u64);
    let per_epoch = refresh + 2 * b * k_in;
    let n_p = run.k_out as u64 * (k_in + 1);
    let n_a = run.k_out as u64 * per_epoch;
    let n_mc = match run.evaluation {
        Evaluation::Exact => 0,
        Evaluation::MonteCarlo => (1..=run.k_out).map(|t| run.m.at(t) as u64 * per_epoch).sum(),
    };
    let c = traj.counters;
    let monotone = traj.records.windows(2).all(|w| {
        let (a, b) = (w[0].counters, w[1].counters);
        a.prox_calls <= b.prox_calls && a.approximations <= b.approximations && a.mc_draws <= b.mc_draws
    });
    Check::new(
        NAME,
        monotone && (c.prox_calls, c.approximations, c.mc_draws) == (n_p, n_a, n_mc),
        format!(
            "N_P {} (expected {n_p}), N_A {} (expected {n_a}), N_MC {} (expected {n_mc}), monotone {monotone}",
            c.prox_calls, c.approximations, c.mc_draws
        ),
    )
}

/// Monte Carlo means of ‖Ŝ_{τ,K} − Ŝ_{τ,K−1}‖²/γ⋆² and Δ_{τ,K} over
/// independent runs, against the bounds plus two standard errors.
#[derive(Debug, Clone)]
pub struct BoundCheck {
    pub step_mean: f64,
    pub step_se: f64,
    pub step_bound: f64,
    pub delta_mean: f64,
    pub delta_se: f64,
    pub delta_bound: f64,
    pub gap: f64,
    pub c_v: f64,
}

impl BoundCheck {
    pub fn passes(&self) -> bool {
        self.step_mean <= self.step_bound + 2.0 * self.step_se && self.delta_mean <= self.delta_bound + 2.0 * self.delta_se
    }
}

pub fn bound_check<O: GradientOracle + ?Sized>(
    subject: &Subject<'_, O>,
    draws: usize,
    surrogate_iterations: usize,
    seed: u64,
) -> spider3p::Result<BoundCheck> {
    let Some(objective) = subject.objective else {
        return Err(spider3p::Error::MissingCapability("objective"));
    };
    let StepSize::GammaStar(lip) = &subject.run.step else {
        return Err(spider3p::Error::Hypotheses("inner step must be gamma_star".into()));
    };
    let (v_min, v_max) = (subject.precond.v_min(), subject.precond.v_max());
    // Hypothesis check before the expensive part; C_v and the gap are
    // placeholders here.
    let probe = BoundConstants {
        v_min,
        v_max,
        l_wdot: lip.l_wdot,
        l: lip.l,
        c_v: 0.0,
        gap: 0.0,
    };
    stop_time_rhs(subject.run, &probe)?;

    let q = subject.oracle.dim();
    let init = match &subject.run.init {
        Some(s) => s.clone(),
        None => project_domain(subject.precond, subject.reg, &Vector::zeros(q))?,
    };
    let gamma = subject.run.gamma(subject.precond)?;
    let surrogate = run_full_prox_gradient(
        &FullGradientConfig {
            iterations: surrogate_iterations,
            gamma,
            init: Some(init.clone()),
            tol: Some(1e-26),
        },
        subject.oracle,
        subject.precond,
        subject.reg,
        Some(|s: &Vector| objective(s)),
    )?;
    let min_value = surrogate.final_objective.expect("objective supplied");
    let gap = (objective(&init)? - min_value).max(0.0);

    let mut run = subject.run.clone();
    run.exact_delta.at_stop = true;
    let outcomes = (0..draws)
        .into_par_iter()
        .map(|j| {
            let mut run = run.clone();
            run.seed = seed.wrapping_add(j as u64 + 1);
            let traj = run_3p_spider(&run, subject.oracle, subject.precond, subject.reg)?;
            let st = traj.stop_time.expect("stop time drawn");
            let rec = traj.stop_record().expect("stop record");
            let prev = traj.previous_state(st.tau, st.k).expect("predecessor");
            let step = (&rec.state - prev).norm_squared() / (gamma * gamma);
            let delta = rec.delta_exact.ok_or(spider3p::Error::MissingCapability("exact"))?;
            let ends: Vec<Vector> = if j == 0 {
                traj.epoch_ends().map(|r| r.state.clone()).collect()
            } else {
                Vec::new()
            };
            Ok((step, delta, ends))
        })
        .collect::<spider3p::Result<Vec<_>>>()?;
    let mut visited = vec![init, surrogate.final_state().expect("nonempty").clone()];
    let mut steps = Vec::with_capacity(draws);
    let mut deltas = Vec::with_capacity(draws);
    for (step, delta, ends) in outcomes {
        steps.push(step);
        deltas.push(delta);
        visited.extend(ends);
    }
    let c_v = estimate_cv(subject.oracle, &visited)?;
    let bounds = stop_time_rhs(
        subject.run,
        &BoundConstants {
            c_v,
            gap,
            ..probe
        },
    )?;
    let s = mean_se(&steps).expect("draws > 0");
    let d = mean_se(&deltas).expect("draws > 0");
    Ok(BoundCheck {
        step_mean: s.mean,
        step_se: s.se.unwrap_or(0.0),
        step_bound: bounds.step,
        delta_mean: d.mean,
        delta_se: d.se.unwrap_or(0.0),
        delta_bound: bounds.delta,
        gap,
        c_v,
    })
}

fn stop_time_bounds<O: GradientOracle + ?Sized>(subject: &Subject<'_, O>, settings: &Settings) -> Check {
    const NAME: &str = "stop-time-bounds";
    if subject.objective.is_none() {
        return Check::skip(NAME, "no objective evaluator");
    }
    if !subject.oracle.has_exact() {
        return Check::skip(NAME, "oracle has no exact capability");
    }
    match bound_check(subject, settings.bound_draws, settings.surrogate_iterations, settings.seed) {
        Ok(bc) => Check::new(
            NAME,
            bc.passes(),
            format!(
                "step {:.3e} +/- {:.1e} <= {:.3e}; delta {:.3e} +/- {:.1e} <= {:.3e} (C_v {:.3e}, gap {:.3e}, {} draws)",
                bc.step_mean,
                bc.step_se,
                bc.step_bound,
                bc.delta_mean,
                bc.delta_se,
                bc.delta_bound,
                bc.c_v,
                bc.gap,
                settings.bound_draws
            ),
        ),
        Err(spider3p::Error::Hypotheses(why)) => Check::skip(NAME, format!("outside the bound's hypotheses: {why}")),
        Err(e @ spider3p::Error::MissingCapability(_)) => Check::skip(NAME, e.to_string()),
        Err(e) => Check::error(NAME, e),
    }
}
