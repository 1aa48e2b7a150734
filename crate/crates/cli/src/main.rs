use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gradcost::analysis::Suite;
use gradcost_cli::config::{parse_config, ExperimentConfig};
use gradcost_cli::sweep::{sweep, Axis};
use gradcost_cli::{run, verify};

#[derive(Parser)]
#[command(name = "gradcost", version, about = "Gradient engines, cost accounting and convergence experiments")]
struct Cli {
    /// Worker threads for parallel estimators and sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write per-iteration telemetry as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// CSV path; a directory gets `<method>-seed<seed>.csv`. Defaults to
        /// the config's `out`, then stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a verification suite and print a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat a run over a list of values for one setting.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        /// Output directory for per-point CSVs and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// First seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds per value.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let workers = cli.workers.unwrap_or_else(rayon::current_num_threads).max(1);
    if cli.workers.is_some() {
        rayon::ThreadPoolBuilder::new().num_threads(workers).build_global()?;
    }
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let mut path = out.or_else(|| cfg.out.clone());
            if let Some(p) = &path {
                if p.is_dir() {
                    path = Some(p.join(format!("{}-seed{}.csv", cfg.run.method, cfg.run.seed)));
                }
            }
            let outcome = run::run_to(&cfg, path.as_deref())?;
            if let Some(why) = &outcome.divergence {
                eprintln!("run diverged: {why}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            suite,
            tolerance_scale,
            out,
        } => {
            let report = verify::verify(suite, tolerance_scale)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                std::fs::write(&p, &json).with_context(|| format!("cannot write {}", p.display()))?;
            }
            println!("{json}");
            Ok(if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            seed,
            seeds,
        } => {
            let cfg = load(&config)?;
            let first = seed.unwrap_or(cfg.run.seed);
            let seed_list: Vec<u64> = (first..first + seeds).collect();
            let points = sweep(&cfg, axis, &values, &seed_list, &out, workers)?;
            for p in &points {
                eprintln!(
                    "{}: final_loss={} diverged={} flops={}",
                    p.point, p.final_loss, p.diverged, p.flops_total
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
