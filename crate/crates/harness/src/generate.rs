//! Synthetic dataset files with a provenance sidecar.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::SyntheticConfig;
use crate::error::{HarnessError, Result};
use crate::problem::synthesize;

pub const DATASET_FILE: &str = "dataset.csv";
pub const SIDECAR_FILE: &str = "dataset.json";

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    seed: u64,
    n: usize,
    d: usize,
    sigma2: f64,
    theta_scale: f64,
    row_scale: f64,
    theta_star: Vec<f64>,
    dataset: &'a str,
}

/// Writes `dir/dataset.csv` and `dir/dataset.json`; returns both paths.
pub fn generate(spec: &SyntheticConfig, sigma2: f64, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if spec.n == 0 || spec.d == 0 {
        return Err(HarnessError::Config(format!(
            "generate: n and d must be positive (got n = {}, d = {})",
            spec.n, spec.d
        )));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(HarnessError::Config(format!("generate: sigma2 must be positive, got {sigma2}")));
    }
    let (data, theta) = synthesize(spec, sigma2)?;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let csv = dir.join(DATASET_FILE);
    let json = dir.join(SIDECAR_FILE);
    data.save(&csv).map_err(|e| match e {
        spider3p::Error::Io(io) => HarnessError::io(&csv, io),
        other => HarnessError::Core(other),
    })?;
    let sidecar = Sidecar {
        seed: spec.seed,
        n: spec.n,
        d: spec.d,
        sigma2,
        theta_scale: spec.theta_scale,
        row_scale: spec.row_scale,
        theta_star: theta.iter().copied().collect(),
        dataset: DATASET_FILE,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    std::fs::write(&json, text).map_err(|e| HarnessError::io(&json, e))?;
    Ok((csv, json))
}
