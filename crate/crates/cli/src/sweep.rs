//! One-dimensional parameter sweeps.

use std::fs::{self, File};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gradcost::analysis::ObjectiveSpec;
use gradcost::variants::Base;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::run::{execute, write_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Eta,
    N,
    D,
    Epsilon,
    Sigma2,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "eta" => Axis::Eta,
            "n" => Axis::N,
            "d" => Axis::D,
            "epsilon" => Axis::Epsilon,
            "sigma2" => Axis::Sigma2,
            other => bail!("unknown axis `{other}` (expected eta, n, d, epsilon or sigma2)"),
        })
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Eta => "eta",
            Axis::N => "n",
            Axis::D => "d",
            Axis::Epsilon => "epsilon",
            Axis::Sigma2 => "sigma2",
        })
    }
}

fn count(axis: Axis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        bail!("{axis} values must be positive integers, got {v}")
    }
}

/// `base` with the swept setting replaced by `v`.
pub fn apply(base: &ExperimentConfig, axis: Axis, v: f64) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    let method = c.run.method;
    match axis {
        Axis::Eta => {
            if !(v > 0.0 && v.is_finite()) {
                bail!("eta values must be positive, got {v}");
            }
            c.run.optimizer.eta = v;
        }
        Axis::N => {
            if method.is_bp() {
                bail!("an n sweep needs a perturbation method, not {method}");
            }
            c.run.estimator.n = count(axis, v)?;
        }
        Axis::Epsilon => {
            if method.base() != Some(Base::Zo) {
                bail!("epsilon only affects zero-order methods, not {method}");
            }
            if !(v > 0.0 && v.is_finite()) {
                bail!("epsilon values must be positive, got {v}");
            }
            c.run.estimator.epsilon = v;
        }
        Axis::Sigma2 => {
            if method.is_bp() {
                bail!("sigma2 only affects perturbation methods, not {method}");
            }
            if !(v > 0.0 && v.is_finite()) {
                bail!("sigma2 values must be positive, got {v}");
            }
            c.run.estimator.sigma2 = v;
        }
        Axis::D => {
            let d = count(axis, v)?;
            match &mut c.objective {
                ObjectiveSpec::Quadratic { d: dd, .. } => *dd = d,
                ObjectiveSpec::LogisticBlobs {
                    features,
                    classes,
                    model: None,
                    ..
                } => {
                    if d % *classes != 0 {
                        bail!("d = {d} is not a multiple of the class count {classes}");
                    }
                    *features = d / *classes;
                }
                _ => bail!("a d sweep needs a quadratic or default logistic-blobs objective"),
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub point: String,
    pub axis: Axis,
    pub value: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub diverged: bool,
    pub flops_total: u64,
    pub peak_act_units: u64,
    pub wall_ms: u64,
}

pub fn point_name(axis: Axis, value: f64, seed: u64) -> String {
    format!("{axis}={value}_seed={seed}")
}

/// Runs every `(value, seed)` pair on `workers` threads, writing
/// `<point>.csv` per pair and `summary.json` once all have finished.
pub fn sweep(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[f64],
    seeds: &[u64],
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        bail!("a sweep needs at least one value");
    }
    if seeds.is_empty() {
        bail!("a sweep needs at least one seed");
    }
    let mut jobs = Vec::new();
    for &v in values {
        let c = apply(base, axis, v)?;
        for &s in seeds {
            let mut c = c.clone();
            c.run.seed = s;
            jobs.push((v, s, c));
        }
    }
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let points: Vec<SweepPoint> = pool.install(|| {
        jobs.par_iter()
            .map(|(v, s, c)| {
                let name = point_name(axis, *v, *s);
                let start = Instant::now();
                let outcome = execute(c).with_context(|| format!("point {name}"))?;
                let wall_ms = start.elapsed().as_millis() as u64;
                let path = out_dir.join(format!("{name}.csv"));
                let f = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
                write_csv(f, c, &outcome)?;
                Ok(SweepPoint {
                    point: name,
                    axis,
                    value: *v,
                    seed: *s,
                    final_loss: outcome.final_loss,
                    diverged: outcome.diverged,
                    flops_total: outcome.records.last().map_or(0, |r| r.flops_cum),
                    peak_act_units: outcome.records.iter().map(|r| r.peak_act_units).max().unwrap_or(0),
                    wall_ms,
                })
            })
            .collect::<Result<_>>()
    })?;
    let summary = out_dir.join("summary.json");
    fs::write(&summary, serde_json::to_string_pretty(&points)?)
        .with_context(|| format!("cannot write {}", summary.display()))?;
    Ok(points)
}
