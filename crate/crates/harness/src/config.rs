//! The JSON experiment document.
//!
//! Precedence: command-line flags, then the file, then the defaults below.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub replications: Replications,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// CSV file with header `y,x1,..,xd`; relative paths are resolved against
    /// the directory of the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub sigma2: f64,
    pub tau: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Expected covariate dimension d, checked against the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
}

fn default_nodes() -> usize {
    spider3p::logistic::DEFAULT_NODES
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub theta_scale: f64,
    #[serde(default = "one")]
    pub row_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlgorithmConfig {
    #[serde(rename = "3p-spider")]
    Spider(SpiderConfig),
    ProxOnlineEm(OnlineEmConfig),
    FullProxGradient(FullGradientSettings),
}

impl AlgorithmConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmConfig::Spider(_) => "3p-spider",
            AlgorithmConfig::ProxOnlineEm(_) => "prox-online-em",
            AlgorithmConfig::FullProxGradient(_) => "full-prox-gradient",
        }
    }

    pub fn init(&self) -> &InitConfig {
        match self {
            AlgorithmConfig::Spider(c) => &c.init,
            AlgorithmConfig::ProxOnlineEm(c) => &c.init,
            AlgorithmConfig::FullProxGradient(c) => &c.init,
        }
    }
}

/// `"star"` or a positive number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaConfig {
    Value(f64),
    Named(GammaName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaName {
    Star,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig::Named(GammaName::Star)
    }
}

/// A constant budget or `[[first_t, m], ...]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MConfig {
    Constant(usize),
    Schedule(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzAggregation {
    #[default]
    Max,
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationConfig {
    #[default]
    MonteCarlo,
    Exact,
}

/// Starting point Ŝ_init.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitConfig {
    /// s = 0, which always lies in K.
    #[default]
    Origin,
    Point(Vec<f64>),
    /// √(fraction·r)·v/‖v‖_Ω, on the Ω-ellipsoid sᵀΩs = fraction·r. The default
    /// direction alternates 1, −½.
    Boundary {
        fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        direction: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiderConfig {
    pub k_out: usize,
    pub k_in: usize,
    pub b: usize,
    #[serde(default)]
    pub gamma: GammaConfig,
    #[serde(default)]
    pub lipschitz: LipschitzAggregation,
    #[serde(default)]
    pub gamma_t0: f64,
    pub m: MConfig,
    /// Subsampled refresh of size b′ in place of the full pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh_batch: Option<usize>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub record_wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineEmConfig {
    pub iterations: usize,
    pub b: usize,
    #[serde(default = "online_gamma")]
    pub gamma: f64,
    /// γ_t = gamma / t instead of a constant step.
    #[serde(default)]
    pub decay: bool,
    pub m: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub init: InitConfig,
}

fn online_gamma() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullGradientSettings {
    pub iterations: usize,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default)]
    pub init: InitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replications {
    #[serde(default = "one_run")]
    pub runs: usize,
    /// Run r (1-based) uses seed base_seed + r.
    #[serde(default)]
    pub base_seed: u64,
}

fn one_run() -> usize {
    1
}

impl Default for Replications {
    fn default() -> Self {
        Self { runs: 1, base_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Evaluate the exact Δ every this many cumulative inner steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_delta_stride: Option<usize>,
    #[serde(default = "yes")]
    pub exact_delta_at_stop: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            exact_delta_stride: None,
            exact_delta_at_stop: true,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and makes a relative dataset path absolute with respect
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(ds) = &cfg.problem.dataset {
            if ds.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                let joined = base.join(ds);
                cfg.problem.dataset = Some(std::path::absolute(&joined).unwrap_or(joined));
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.replications.base_seed = seed;
        }
        if let Some(out) = &overrides.out {
            self.output.dir = out.clone();
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let p = &self.problem;
        match (&p.dataset, &p.synthetic) {
            (Some(_), Some(_)) => return bad("problem: give either `dataset` or `synthetic`, not both".into()),
            (None, None) => return bad("problem: one of `dataset` or `synthetic` is required".into()),
            _ => {}
        }
        if !(p.sigma2 > 0.0 && p.sigma2.is_finite()) || !(p.tau > 0.0 && p.tau.is_finite()) {
            return bad(format!("problem: sigma2 and tau must be positive (got {}, {})", p.sigma2, p.tau));
        }
        if p.nodes < 16 {
            return bad(format!("problem: nodes must be at least 16, got {}", p.nodes));
        }
        if let Some(s) = &p.synthetic {
            if s.n == 0 || s.d == 0 {
                return bad(format!("problem.synthetic: n and d must be positive (got {}, {})", s.n, s.d));
            }
            if let Some(dim) = p.dimension {
                if dim != s.d {
                    return bad(format!("problem: dimension {dim} does not match synthetic d = {}", s.d));
                }
            }
        }
        if self.replications.runs == 0 {
            return bad("replications.runs must be positive".into());
        }
        if self.output.exact_delta_stride == Some(0) {
            return bad("output.exact_delta_stride must be positive".into());
        }
        let check_init = |init: &InitConfig| -> Result<()> {
            if let InitConfig::Boundary { fraction, .. } = init {
                if !(*fraction >= 0.0 && *fraction <= 1.0) {
                    return bad(format!("init.boundary.fraction must lie in [0, 1], got {fraction}"));
                }
            }
            Ok(())
        };
        check_init(self.algorithm.init())?;
        match &self.algorithm {
            AlgorithmConfig::Spider(c) => {
                if c.k_out == 0 || c.k_in == 0 || c.b == 0 {
                    return bad("algorithm: k_out, k_in and b must be positive".into());
                }
                if let GammaConfig::Value(g) = c.gamma {
                    if !(g > 0.0 && g.is_finite()) {
                        return bad(format!("algorithm.gamma must be positive or \"star\", got {g}"));
                    }
                }
                if !(c.gamma_t0 >= 0.0 && c.gamma_t0.is_finite()) {
                    return bad(format!("algorithm.gamma_t0 must be nonnegative, got {}", c.gamma_t0));
                }
                match &c.m {
                    MConfig::Constant(0) => return bad("algorithm.m must be positive".into()),
                    MConfig::Schedule(seg) if seg.is_empty() => {
                        return bad("algorithm.m schedule is empty".into())
                    }
                    _ => {}
                }
                if c.refresh_batch == Some(0) {
                    return bad("algorithm.refresh_batch must be positive".into());
                }
            }
            AlgorithmConfig::ProxOnlineEm(c) => {
                if c.iterations == 0 || c.b == 0 || c.m == 0 {
                    return bad("algorithm: iterations, b and m must be positive".into());
                }
                if !(c.gamma > 0.0 && c.gamma.is_finite()) {
                    return bad(format!("algorithm.gamma must be positive, got {}", c.gamma));
                }
            }
            AlgorithmConfig::FullProxGradient(c) => {
                if c.iterations == 0 || !(c.gamma > 0.0 && c.gamma.is_finite()) {
                    return bad("algorithm: iterations and gamma must be positive".into());
                }
            }
        }
        Ok(())
    }
}
