//! Command-line front end: run experiments, solve temperature ranges, run the
//! p-value calibration harness, and sweep a parameter across values and seeds.
//!
//! On failure the process prints a machine-readable error JSON to stderr and
//! exits nonzero.

use clap::{Parser, Subcommand};
use fedfair::error::Error;
use fedfair::incentive;
use fedfair::orchestrator::{run_experiment, ExperimentConfig};
use fedfair::stopping::calibrate_pvalues;
use serde_json::json;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "fedfair", version, about = "Contribution-proportional client sampling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "PATH")]
        out_dir: PathBuf,
    },
    /// Solve the temperature range for a target proportionality band.
    BetaRange {
        /// Lower bound on the frozen contribution estimates.
        #[arg(long)]
        m1: f64,
        /// Upper bound on the frozen contribution estimates.
        #[arg(long)]
        m2: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        r1: f64,
        #[arg(long)]
        r2: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Null-rejection calibration of the stopping test's p-values.
    CalibrateTest {
        #[arg(long, default_value_t = 5)]
        dim: usize,
        #[arg(long, default_value_t = 60)]
        t_s: usize,
        #[arg(long, default_value_t = 20)]
        tau: usize,
        /// Comma-separated significance levels.
        #[arg(long, default_value = "0.05,0.5", value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        histories: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the config once per (value, seed) pair for one swept parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Parameter to sweep: beta | k | alpha | tau | participation_prob |
        /// learning_rate | batch_size.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds to cross with the values; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_name = "PATH")]
        out_dir: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(err) => {
            let payload = json!({
                "error": { "kind": err.kind(), "message": err.to_string() }
            });
            eprintln!("{payload}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, seed, out_dir } => {
            let mut config = ExperimentConfig::from_path(&config)?;
            if let Some(seed) = seed {
                config.experiment.master_seed = seed;
                config.validate()?;
            }
            let report = run_experiment(&config)?;
            report.write_to_dir(&out_dir)?;
            println!(
                "{}",
                json!({
                    "out_dir": out_dir,
                    "mode": report.mode,
                    "seed": report.seed,
                    "t_alpha": report.aggregate.t_alpha,
                    "t_total": report.aggregate.t_total,
                    "pearson_loss_zeta": report.aggregate.pearson_loss_zeta,
                    "pearson_staleness_zeta": report.aggregate.pearson_staleness_zeta,
                    "recall_fraction": report.aggregate.recall_fraction,
                })
            );
            Ok(())
        }
        Command::BetaRange { m1, m2, n, k, r1, r2, tol } => {
            let (beta_lo, beta_hi) = incentive::beta_range(m1, m2, n, k, r1, r2, tol)?;
            println!("{}", json!({ "beta_lo": beta_lo, "beta_hi": beta_hi }));
            Ok(())
        }
        Command::CalibrateTest { dim, t_s, tau, alphas, histories, seed } => {
            let report = calibrate_pvalues(dim, t_s, tau, &alphas, histories, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Sweep { config, param, values, seeds, out_dir } => {
            let base = ExperimentConfig::from_path(&config)?;
            let seeds = if seeds.is_empty() {
                vec![base.experiment.master_seed]
            } else {
                seeds
            };
            std::fs::create_dir_all(&out_dir)?;
            let mut summary = Vec::new();
            let mut rows = vec![
                "param,value,seed,t_alpha,pearson_loss_zeta,pearson_staleness_zeta,recall_fraction,std_online_loss,std_final_loss"
                    .to_string(),
            ];
            for &value in &values {
                for &seed in &seeds {
                    let mut config = base.clone();
                    apply_param(&mut config, &param, value)?;
                    config.experiment.master_seed = seed;
                    config.validate()?;
                    let report = run_experiment(&config)?;
                    let dir = out_dir.join(format!("{param}-{value}-seed-{seed}"));
                    report.write_to_dir(&dir)?;
                    rows.push(format!(
                        "{param},{value},{seed},{},{},{},{},{},{}",
                        opt(report.aggregate.t_alpha.map(|v| v as f64)),
                        opt(report.aggregate.pearson_loss_zeta),
                        opt(report.aggregate.pearson_staleness_zeta),
                        opt(report.aggregate.recall_fraction),
                        report.aggregate.std_online_loss,
                        report.aggregate.std_final_loss,
                    ));
                    summary.push(json!({
                        "param": param,
                        "value": value,
                        "seed": seed,
                        "out_dir": dir,
                        "t_alpha": report.aggregate.t_alpha,
                        "pearson_loss_zeta": report.aggregate.pearson_loss_zeta,
                        "pearson_staleness_zeta": report.aggregate.pearson_staleness_zeta,
                        "recall_fraction": report.aggregate.recall_fraction,
                        "std_online_loss": report.aggregate.std_online_loss,
                        "std_final_loss": report.aggregate.std_final_loss,
                    }));
                }
            }
            std::fs::write(
                out_dir.join("sweep.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            std::fs::write(out_dir.join("sweep.csv"), rows.join("\n") + "\n")?;
            println!("{}", json!({ "runs": summary.len(), "out_dir": out_dir }));
            Ok(())
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn as_usize(param: &str, value: f64) -> Result<usize, Error> {
    if value.fract() != 0.0 || value < 0.0 {
        return Err(Error::Config(format!(
            "parameter {param} needs a nonnegative integer, got {value}"
        )));
    }
    Ok(value as usize)
}

fn apply_param(config: &mut ExperimentConfig, param: &str, value: f64) -> Result<(), Error> {
    match param {
        "beta" => config.experiment.beta = value,
        "k" => config.experiment.k = as_usize(param, value)?,
        "alpha" => config.stopping.alpha = value,
        "tau" => config.stopping.tau = as_usize(param, value)?,
        "participation_prob" => config.experiment.participation_prob = value,
        "learning_rate" => config.model.learning_rate = value,
        "batch_size" => config.model.batch_size = as_usize(param, value)?,
        other => {
            return Err(Error::Config(format!(
                "unsupported sweep parameter {other:?} (use beta, k, alpha, tau, participation_prob, learning_rate, or batch_size)"
            )))
        }
    }
    Ok(())
}
