use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spider3p_harness::config::SyntheticConfig;
use spider3p_harness::diagnose::Settings;
use spider3p_harness::experiment::execute;
use spider3p_harness::generate::generate;
use spider3p_harness::{diagnose_config, ExperimentConfig, HarnessError, Overrides, Result};

/// Perturbed prox-preconditioned SPIDER experiments on latent logistic regression.
///
/// Precedence: command-line flags override values from the --config file,
/// which override built-in defaults.
#[derive(Parser)]
#[command(name = "spider3p", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for replications (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.csv and its dataset.json sidecar.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long)]
        theta_scale: Option<f64>,
        #[arg(long)]
        row_scale: Option<f64>,
    },
    /// Run the replications of an experiment and write metrics, quantiles and summary.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Check the oracle, prox, counters and bounds of a configured problem.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Replications per error-law estimate.
        #[arg(long, default_value_t = 2000)]
        reps: usize,
        /// Independent runs for the stop-time bound check.
        #[arg(long, default_value_t = 20)]
        draws: usize,
    },
    /// Print the b = k_in = sqrt(n) parameter plan and its predicted cost.
    Plan {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        epsilon: f64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
    });
    Ok(cfg)
}

fn threads(common: &Common) -> Result<()> {
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(HarnessError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            common,
            n,
            d,
            sigma2,
            theta_scale,
            row_scale,
        } => {
            let (mut spec, mut s2) = match &common.config {
                Some(path) => {
                    let cfg = ExperimentConfig::load(path)?;
                    let spec = cfg.problem.synthetic.ok_or_else(|| {
                        HarnessError::Config(format!("{}: problem has no synthetic block", path.display()))
                    })?;
                    (spec, cfg.problem.sigma2)
                }
                None => (
                    SyntheticConfig {
                        n: 0,
                        d: 0,
                        seed: 0,
                        theta_scale: 1.0,
                        row_scale: 1.0,
                    },
                    0.1,
                ),
            };
            if common.config.is_none() && (n.is_none() || d.is_none()) {
                return Err(HarnessError::Config("generate needs --n and --d (or --config)".into()));
            }
            spec.n = n.unwrap_or(spec.n);
            spec.d = d.unwrap_or(spec.d);
            spec.seed = common.seed.unwrap_or(spec.seed);
            spec.theta_scale = theta_scale.unwrap_or(spec.theta_scale);
            spec.row_scale = row_scale.unwrap_or(spec.row_scale);
            s2 = sigma2.unwrap_or(s2);
            let dir = common.out.unwrap_or_else(|| PathBuf::from("data"));
            let (csv, json) = generate(&spec, s2, &dir)?;
            println!("wrote {} and {}", csv.display(), json.display());
        }
        Command::Run { common } => {
            threads(&common)?;
            let cfg = load(&common)?;
            let (summary, written) = execute(&cfg)?;
            println!(
                "{} runs of {} (n = {}, d = {}, gamma = {:.6e})",
                summary.runs, summary.algorithm, summary.n, summary.d, summary.gamma
            );
            if let Some(m) = summary.stop_delta_hat {
                println!(
                    "E[delta_hat at stop] = {:.6e} (se {})",
                    m.mean,
                    m.se.map_or("n/a".into(), |s| format!("{s:.3e}"))
                );
            }
            println!("wrote {}", written.metrics.display());
            println!("wrote {}", written.quantiles.display());
            println!("wrote {}", written.summary.display());
            println!("wrote {}", written.config.display());
        }
        Command::Diagnose { common, reps, draws } => {
            threads(&common)?;
            let cfg = load(&common)?;
            let settings = Settings {
                reps,
                bound_draws: draws,
                seed: common.seed.unwrap_or(Settings::default().seed),
                ..Settings::default()
            };
            let report = diagnose_config(&cfg, &settings)?;
            print!("{report}");
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
                let path = dir.join("diagnostics.txt");
                std::fs::write(&path, report.to_string()).map_err(|e| HarnessError::io(&path, e))?;
            }
            let failed = report.failures();
            if failed > 0 {
                return Err(HarnessError::Diagnostics(failed));
            }
        }
        Command::Plan { n, epsilon } => {
            let p = spider3p::spider::plan_complexity(n, epsilon)?;
            println!("b      {}", p.b);
            println!("k_in   {}", p.k_in);
            println!("k_out  {}", p.k_out);
            println!("m      {}", p.m);
            println!("N_P    {}", p.predicted.prox_calls);
            println!("N_A    {}", p.predicted.approximations);
            println!("N_MC   {}", p.predicted.mc_draws);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
