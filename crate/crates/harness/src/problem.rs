//! Turns the problem block into a latent logistic model and resolves the
//! algorithm block against it.

use spider3p::baselines::{FullGradientConfig, OnlineConfig, OnlineStep};
use spider3p::logistic::{generate_synthetic, Dataset, LatentLogistic, ModelParams, SyntheticSpec};
use spider3p::oracle::{Aggregation, SamplingMode};
use spider3p::rng::{self, Purpose};
use spider3p::spider::{Evaluation, ExactDelta, MSchedule, Refresh, RunConfig, StepSize};
use spider3p::{Preconditioner, Regularizer, Vector};

use crate::config::{
    EvaluationConfig, ExperimentConfig, FullGradientSettings, GammaConfig, InitConfig,
    LipschitzAggregation, MConfig, OnlineEmConfig, ProblemConfig, Sampling, SpiderConfig, SyntheticConfig,
};
use crate::error::{HarnessError, Result};

pub struct Problem {
    pub model: LatentLogistic,
    pub precond: Preconditioner,
    pub reg: Regularizer,
    /// Ground truth, for synthetic problems.
    pub theta_star: Option<Vector>,
}

/// The dataset and θ⋆ a synthetic block describes; `generate` and inline
/// synthetic problems share this, so both see the same data.
pub fn synthesize(spec: &SyntheticConfig, sigma2: f64) -> Result<(Dataset, Vector)> {
    let mut rng = rng::stream(spec.seed, Purpose::Data, 0, 0, 0);
    let s = SyntheticSpec {
        n: spec.n,
        d: spec.d,
        sigma2,
        theta_scale: spec.theta_scale,
        row_scale: spec.row_scale,
    };
    generate_synthetic(&s, &mut rng).map_err(|e| HarnessError::Config(format!("synthetic spec: {e}")))
}

pub fn build_problem(cfg: &ProblemConfig) -> Result<Problem> {
    let (data, theta_star) = match (&cfg.dataset, &cfg.synthetic) {
        (Some(path), None) => {
            let data = Dataset::load(path).map_err(|e| match e {
                spider3p::Error::Io(io) => HarnessError::io(path, io),
                other => HarnessError::Config(format!("{}: {other}", path.display())),
            })?;
            (data, None)
        }
        (None, Some(spec)) => {
            let (data, theta) = synthesize(spec, cfg.sigma2)?;
            (data, Some(theta))
        }
        _ => return Err(HarnessError::Config("problem needs exactly one data source".into())),
    };
    if let Some(dim) = cfg.dimension {
        if dim != data.d() {
            return Err(HarnessError::Config(format!(
                "dataset has dimension {} but the config expects {dim}",
                data.d()
            )));
        }
    }
    let params = ModelParams::new(cfg.sigma2, cfg.tau).map_err(|e| HarnessError::Config(e.to_string()))?;
    let model = LatentLogistic::with_nodes(data, params, cfg.nodes)?;
    Ok(Problem {
        precond: model.preconditioner()?,
        reg: model.constraint_set()?,
        model,
        theta_star,
    })
}

impl Problem {
    pub fn d(&self) -> usize {
        self.model.data().d()
    }

    /// Radius r of K = {s : sᵀΩs ≤ r}.
    pub fn radius(&self) -> f64 {
        4f64.ln() / (self.model.params().tau * self.model.omega().lambda_min())
    }

    pub fn resolve_init(&self, init: &InitConfig) -> Result<Option<Vector>> {
        let d = self.d();
        let check = |v: &[f64], what: &str| {
            if v.len() == d {
                Ok(())
            } else {
                Err(HarnessError::Config(format!("init {what} has length {} but d = {d}", v.len())))
            }
        };
        match init {
            InitConfig::Origin => Ok(Some(Vector::zeros(d))),
            InitConfig::Point(p) => {
                check(p, "point")?;
                let s = Vector::from_column_slice(p);
                if !self.reg.value(&s).is_finite() {
                    return Err(HarnessError::Config("init point lies outside the constraint set".into()));
                }
                Ok(Some(s))
            }
            InitConfig::Boundary { fraction, direction } => {
                let v = match direction {
                    Some(dir) => {
                        check(dir, "direction")?;
                        Vector::from_column_slice(dir)
                    }
                    None => Vector::from_fn(d, |i, _| if i % 2 == 0 { 1.0 } else { -0.5 }),
                };
                let norm2 = v.dot(&(self.model.omega().matrix() * &v));
                if !(norm2 > 0.0) {
                    return Err(HarnessError::Config("init direction must be nonzero".into()));
                }
                Ok(Some(v * (fraction * self.radius() / norm2).sqrt()))
            }
        }
    }

    pub fn spider_config(&self, c: &SpiderConfig, exp: &ExperimentConfig, seed: u64) -> Result<RunConfig> {
        let step = match c.gamma {
            GammaConfig::Value(g) => StepSize::Constant(g),
            GammaConfig::Named(_) => StepSize::GammaStar(self.model.lipschitz(match c.lipschitz {
                LipschitzAggregation::Max => Aggregation::Max,
                LipschitzAggregation::Rms => Aggregation::RootMeanSquare,
            })?),
        };
        let m = match &c.m {
            MConfig::Constant(m) => MSchedule::constant(*m),
            MConfig::Schedule(seg) => {
                MSchedule::piecewise(seg.clone()).map_err(|e| HarnessError::Config(format!("algorithm.m: {e}")))?
            }
        };
        let mut run = RunConfig::new(c.k_out, c.k_in, c.b, step, m);
        run.gamma_t0 = c.gamma_t0;
        run.refresh = c.refresh_batch.map_or(Refresh::Full, Refresh::Subsampled);
        run.sampling = sampling(c.sampling);
        run.evaluation = evaluation(c.evaluation);
        run.seed = seed;
        run.init = self.resolve_init(&c.init)?;
        run.exact_delta = ExactDelta {
            stride: exp.output.exact_delta_stride,
            at_stop: exp.output.exact_delta_at_stop,
        };
        run.record_wall_clock = c.record_wall_clock;
        run.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(run)
    }

    pub fn online_config(&self, c: &OnlineEmConfig, seed: u64) -> Result<OnlineConfig> {
        let step = if c.decay {
            OnlineStep::Decay(c.gamma)
        } else {
            OnlineStep::Constant(c.gamma)
        };
        let mut run = OnlineConfig::new(c.iterations, c.b, step, c.m);
        run.seed = seed;
        run.sampling = sampling(c.sampling);
        run.evaluation = evaluation(c.evaluation);
        run.init = self.resolve_init(&c.init)?;
        Ok(run)
    }

    pub fn full_gradient_config(&self, c: &FullGradientSettings) -> Result<FullGradientConfig> {
        Ok(FullGradientConfig {
            iterations: c.iterations,
            gamma: c.gamma,
            init: self.resolve_init(&c.init)?,
            tol: c.tol,
        })
    }
}

fn sampling(s: Sampling) -> SamplingMode {
    match s {
        Sampling::WithReplacement => SamplingMode::WithReplacement,
        Sampling::WithoutReplacement => SamplingMode::WithoutReplacement,
    }
}

fn evaluation(e: EvaluationConfig) -> Evaluation {
    match e {
        EvaluationConfig::MonteCarlo => Evaluation::MonteCarlo,
        EvaluationConfig::Exact => Evaluation::Exact,
    }
}
