//! Single runs and their CSV output.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use gradcost::analysis::{convergence_experiment, Problem, RunOutcome};

use crate::config::ExperimentConfig;

/// Column order of run CSVs. Changing it requires a format bump.
pub const CSV_COLUMNS: [&str; 12] = [
    "iter",
    "loss",
    "grad_norm_sq",
    "jvp_mean",
    "jvp_max",
    "flops_cum",
    "peak_act_units",
    "update_norm",
    "method",
    "n",
    "eta",
    "seed",
];

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let problem = Problem::build(&cfg.objective, cfg.batch_size).context("building the objective")?;
    convergence_experiment(&problem, &cfg.run).context("running the experiment")
}

pub fn write_csv<W: Write>(out: W, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    let r = &cfg.run;
    let n = if r.method.is_bp() { 1 } else { r.estimator.n };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for rec in &outcome.records {
        w.write_record([
            rec.iter.to_string(),
            fmt_float(rec.loss),
            fmt_float(rec.grad_norm_sq),
            fmt_float(rec.jvp_mean),
            fmt_float(rec.jvp_max),
            rec.flops_cum.to_string(),
            rec.peak_act_units.to_string(),
            fmt_float(rec.update_norm),
            r.method.to_string(),
            n.to_string(),
            fmt_float(r.optimizer.eta),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg` and writes the CSV to `path`, or to stdout without one.
pub fn run_to(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<RunOutcome> {
    let outcome = execute(cfg)?;
    match path {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
            write_csv(f, cfg, &outcome)?;
        }
        None => write_csv(std::io::stdout().lock(), cfg, &outcome)?,
    }
    Ok(outcome)
}
