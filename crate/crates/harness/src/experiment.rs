//! Replicated runs and their output files.
//!
//! Run r = 1..R uses seed base_seed + r. Runs execute on the rayon pool; the
//! results are gathered in run order, so the output does not depend on the
//! number of threads.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use spider3p::baselines::{run_full_prox_gradient, run_prox_online_em};
use spider3p::spider::{run_3p_spider, Counters, Trajectory};

use crate::config::{AlgorithmConfig, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{quantiles, rows_from_trajectory, write_metrics, write_quantiles, MetricsRow};
use crate::problem::{build_problem, Problem};

pub struct RunOutput {
    pub run_id: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
}

pub fn run_one(cfg: &ExperimentConfig, problem: &Problem, run_id: usize) -> Result<RunOutput> {
    let seed = cfg.replications.base_seed.wrapping_add(run_id as u64);
    let wrap = |source| HarnessError::Run {
        run: run_id,
        seed,
        source,
    };
    let trajectory = match &cfg.algorithm {
        AlgorithmConfig::Spider(c) => {
            let run = problem.spider_config(c, cfg, seed)?;
            run_3p_spider(&run, &problem.model, &problem.precond, &problem.reg).map_err(wrap)?
        }
        AlgorithmConfig::ProxOnlineEm(c) => {
            let run = problem.online_config(c, seed)?;
            run_prox_online_em(&run, &problem.model, &problem.precond, &problem.reg).map_err(wrap)?
        }
        AlgorithmConfig::FullProxGradient(c) => {
            let run = problem.full_gradient_config(c)?;
            run_full_prox_gradient(
                &run,
                &problem.model,
                &problem.precond,
                &problem.reg,
                Some(|s: &spider3p::Vector| problem.model.objective_w(s)),
            )
            .map_err(wrap)?
        }
    };
    Ok(RunOutput {
        run_id,
        seed,
        trajectory,
    })
}

pub fn run_all(cfg: &ExperimentConfig, problem: &Problem) -> Result<Vec<RunOutput>> {
    (1..=cfg.replications.runs)
        .into_par_iter()
        .map(|r| run_one(cfg, problem, r))
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    /// Absent for a single observation.
    pub se: Option<f64>,
    pub count: usize,
}

pub fn mean_se(values: &[f64]) -> Option<MeanSe> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Some(MeanSe {
        mean,
        se,
        count: values.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StopSummary {
    pub run_id: usize,
    pub seed: u64,
    pub tau: usize,
    pub k: usize,
    pub delta_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_exact: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterSummary {
    pub run_id: usize,
    pub n_p: u64,
    pub n_a: u64,
    pub n_mc: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub algorithm: String,
    pub runs: usize,
    pub base_seed: u64,
    pub n: usize,
    pub d: usize,
    /// Inner step γ (for Prox-Online-EM, the last γ_t).
    pub gamma: f64,
    pub counters: Vec<CounterSummary>,
    pub stop_times: Vec<StopSummary>,
    /// E[Δ̂_{τ,K}] over runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_delta_hat: Option<MeanSe>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_delta_exact: Option<MeanSe>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
}

pub fn summarize(cfg: &ExperimentConfig, problem: &Problem, runs: &[RunOutput]) -> Summary {
    let mut stop_times = Vec::new();
    for r in runs {
        if let (Some(st), Some(rec)) = (r.trajectory.stop_time, r.trajectory.stop_record()) {
            stop_times.push(StopSummary {
                run_id: r.run_id,
                seed: r.seed,
                tau: st.tau,
                k: st.k,
                delta_hat: rec.delta_hat,
                delta_exact: rec.delta_exact,
            });
        }
    }
    let hats: Vec<f64> = stop_times.iter().map(|s| s.delta_hat).collect();
    let exacts: Vec<f64> = stop_times.iter().filter_map(|s| s.delta_exact).collect();
    Summary {
        algorithm: cfg.algorithm.name().into(),
        runs: runs.len(),
        base_seed: cfg.replications.base_seed,
        n: problem.model.data().n(),
        d: problem.d(),
        gamma: runs.first().map_or(f64::NAN, |r| r.trajectory.gamma),
        counters: runs
            .iter()
            .map(|r| counter_summary(r.run_id, r.trajectory.counters))
            .collect(),
        stop_delta_hat: mean_se(&hats),
        stop_delta_exact: mean_se(&exacts),
        stop_times,
        final_objective: runs.first().and_then(|r| r.trajectory.final_objective),
        theta_star: problem.theta_star.as_ref().map(|t| t.iter().copied().collect()),
    }
}

fn counter_summary(run_id: usize, c: Counters) -> CounterSummary {
    CounterSummary {
        run_id,
        n_p: c.prox_calls,
        n_a: c.approximations,
        n_mc: c.mc_draws,
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const QUANTILES_FILE: &str = "quantiles.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config.json";

/// Paths of the files written by [`execute`].
#[derive(Debug, Clone)]
pub struct Written {
    pub metrics: PathBuf,
    pub quantiles: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| HarnessError::io(path, e))
}

fn tag_io(path: &Path) -> impl Fn(HarnessError) -> HarnessError + '_ {
    move |e| match e {
        HarnessError::Io { source, .. } => HarnessError::io(path, source),
        other => other,
    }
}

/// Builds the problem, runs every replication and writes metrics.csv,
/// quantiles.csv, summary.json and the effective config to the output
/// directory.
pub fn execute(cfg: &ExperimentConfig) -> Result<(Summary, Written)> {
    cfg.validate()?;
    let problem = build_problem(&cfg.problem)?;
    let runs = run_all(cfg, &problem)?;
    let rows: Vec<MetricsRow> = runs
        .iter()
        .flat_map(|r| rows_from_trajectory(r.run_id, &r.trajectory))
        .collect();
    let summary = summarize(cfg, &problem, &runs);

    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let written = Written {
        metrics: dir.join(METRICS_FILE),
        quantiles: dir.join(QUANTILES_FILE),
        summary: dir.join(SUMMARY_FILE),
        config: dir.join(CONFIG_ECHO_FILE),
    };
    write_metrics(&rows, create(&written.metrics)?).map_err(tag_io(&written.metrics))?;
    write_quantiles(&quantiles(&rows), create(&written.quantiles)?).map_err(tag_io(&written.quantiles))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&written.summary, json + "\n").map_err(|e| HarnessError::io(&written.summary, e))?;
    std::fs::write(&written.config, cfg.to_json() + "\n").map_err(|e| HarnessError::io(&written.config, e))?;
    Ok((summary, written))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_standard_error() {
        let m = mean_se(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.se.unwrap() - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[2.0]).unwrap().se, None);
        assert!(mean_se(&[]).is_none());
    }
}
