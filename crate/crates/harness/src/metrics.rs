//! Metrics rows, nearest-rank quantiles and their CSV forms.
//!
//! Floats are written with 17 significant digits in scientific notation, so
//! a fixed configuration yields byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use spider3p::logistic::format_f64;
use spider3p::spider::Trajectory;

use crate::error::{HarnessError, Result};

pub const METRICS_HEADER: [&str; 11] = [
    "run_id",
    "t",
    "k",
    "cumulative_inner",
    "delta_hat",
    "delta_exact",
    "sq_norm",
    "n_p",
    "n_a",
    "n_mc",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: usize,
    pub t: usize,
    pub k: usize,
    pub cumulative_inner: usize,
    pub delta_hat: f64,
    pub delta_exact: Option<f64>,
    /// ‖Ŝ_{t,k}‖², unweighted.
    pub sq_norm: f64,
    pub n_p: u64,
    pub n_a: u64,
    pub n_mc: u64,
    pub wall_ms: f64,
}

pub fn rows_from_trajectory(run_id: usize, traj: &Trajectory) -> Vec<MetricsRow> {
    traj.records
        .iter()
        .map(|r| MetricsRow {
            run_id,
            t: r.t,
            k: r.k,
            cumulative_inner: r.cumulative(traj.k_in),
            delta_hat: r.delta_hat,
            delta_exact: r.delta_exact,
            sq_norm: r.state.norm_squared(),
            n_p: r.counters.prox_calls,
            n_a: r.counters.approximations,
            n_mc: r.counters.mc_draws,
            wall_ms: r.wall_ms,
        })
        .collect()
}

fn csv_error(e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::Io {
            path: "<csv>".into(),
            source: io,
        },
        other => HarnessError::Config(format!("malformed CSV: {other:?}")),
    }
}

/// Rows are sorted by (run_id, t, k) before writing.
pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.run_id, r.t, r.k));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER).map_err(csv_error)?;
    for r in sorted {
        w.write_record([
            r.run_id.to_string(),
            r.t.to_string(),
            r.k.to_string(),
            r.cumulative_inner.to_string(),
            format_f64(r.delta_hat),
            r.delta_exact.map(format_f64).unwrap_or_default(),
            format_f64(r.sq_norm),
            r.n_p.to_string(),
            r.n_a.to_string(),
            r.n_mc.to_string(),
            format_f64(r.wall_ms),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| HarnessError::Io {
        path: "<metrics>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(HarnessError::Config(format!(
            "unexpected metrics header {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let bad = |col: usize| HarnessError::Config(format!("metrics row {}: bad value in column {}", line + 1, col + 1));
        let int = |col: usize| rec[col].parse::<u64>().map_err(|_| bad(col));
        let float = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
        rows.push(MetricsRow {
            run_id: int(0)? as usize,
            t: int(1)? as usize,
            k: int(2)? as usize,
            cumulative_inner: int(3)? as usize,
            delta_hat: float(4)?,
            delta_exact: if rec[5].is_empty() { None } else { Some(float(5)?) },
            sq_norm: float(6)?,
            n_p: int(7)?,
            n_a: int(8)?,
            n_mc: int(9)?,
            wall_ms: float(10)?,
        });
    }
    Ok(rows)
}

pub const QUANTILES: [(usize, usize); 3] = [(1, 4), (1, 2), (3, 4)];

/// Nearest-rank quantile num/den of sorted data: the element of rank
/// ⌈N·num/den⌉ (1-based, at least 1), computed in integers.
pub fn nearest_rank(sorted: &[f64], num: usize, den: usize) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let rank = (sorted.len() * num).div_ceil(den).max(1);
    sorted[rank - 1]
}

fn three(mut values: Vec<f64>) -> [f64; 3] {
    values.sort_by(f64::total_cmp);
    QUANTILES.map(|(num, den)| nearest_rank(&values, num, den))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileRow {
    pub t: usize,
    pub k: usize,
    pub cumulative_inner: usize,
    pub runs: usize,
    pub delta_hat: [f64; 3],
    pub sq_norm: [f64; 3],
    /// Over the runs that recorded an exact Δ at this (t, k).
    pub delta_exact: Option<[f64; 3]>,
}

/// Per-(t, k) quartiles {0.25, 0.5, 0.75} across runs.
pub fn quantiles(rows: &[MetricsRow]) -> Vec<QuantileRow> {
    let mut groups: BTreeMap<(usize, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.t, r.k)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((t, k), g)| {
            let exact: Vec<f64> = g.iter().filter_map(|r| r.delta_exact).collect();
            QuantileRow {
                t,
                k,
                cumulative_inner: g[0].cumulative_inner,
                runs: g.len(),
                delta_hat: three(g.iter().map(|r| r.delta_hat).collect()),
                sq_norm: three(g.iter().map(|r| r.sq_norm).collect()),
                delta_exact: (!exact.is_empty()).then(|| three(exact)),
            }
        })
        .collect()
}

pub fn write_quantiles<W: Write>(rows: &[QuantileRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "k".into(), "cumulative_inner".into(), "runs".into()];
    for metric in ["delta_hat", "sq_norm", "delta_exact"] {
        for q in ["q25", "q50", "q75"] {
            header.push(format!("{metric}_{q}"));
        }
    }
    w.write_record(&header).map_err(csv_error)?;
    for r in rows {
        let mut rec = vec![
            r.t.to_string(),
            r.k.to_string(),
            r.cumulative_inner.to_string(),
            r.runs.to_string(),
        ];
        rec.extend(r.delta_hat.iter().map(|v| format_f64(*v)));
        rec.extend(r.sq_norm.iter().map(|v| format_f64(*v)));
        match r.delta_exact {
            Some(q) => rec.extend(q.iter().map(|v| format_f64(*v))),
            None => rec.extend(std::iter::repeat_n(String::new(), 3)),
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush().map_err(|e| HarnessError::Io {
        path: "<quantiles>".into(),
        source: e,
    })?;
    Ok(())
}
