//! Configuration, replicated experiments, CSV outputs and diagnostics for
//! the spider3p engine. The `spider3p` binary is a thin layer over this.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnose;
pub mod error;
pub mod experiment;
pub mod generate;
pub mod metrics;
pub mod problem;

pub use config::{ExperimentConfig, Overrides};
pub use error::{HarnessError, Result};

use config::AlgorithmConfig;
use diagnose::{Report, Settings, Subject};

/// Runs the diagnostics suite on the problem and 3P-SPIDER settings of `cfg`.
pub fn diagnose_config(cfg: &ExperimentConfig, settings: &Settings) -> Result<Report> {
    cfg.validate()?;
    let AlgorithmConfig::Spider(spider) = &cfg.algorithm else {
        return Err(HarnessError::Config(format!(
            "diagnose needs a 3p-spider algorithm block, got {}",
            cfg.algorithm.name()
        )));
    };
    let problem = problem::build_problem(&cfg.problem)?;
    let run = problem.spider_config(spider, cfg, cfg.replications.base_seed)?;
    let objective = |s: &spider3p::Vector| problem.model.objective_w(s);
    let subject = Subject {
        oracle: &problem.model,
        precond: &problem.precond,
        reg: &problem.reg,
        objective: Some(&objective),
        run: &run,
    };
    Ok(diagnose::diagnose(&subject, settings))
}
