//! Monte Carlo procedures for the estimator moment identities.
//!
//! Trials are split into a fixed number of chunks that run in parallel and
//! are merged in chunk order, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::objective::Objective;
use crate::tensor::FlopCounter;
use crate::variants::{estimate_multiple, Base, EstimatorConfig};
use crate::zero_order::Perturbation;

const CHUNKS: u64 = 64;

/// Runs `trials` indexed trials into per-chunk accumulators and merges
/// them in order.
fn chunked<S, I, F, M>(trials: u64, init: I, step: F, merge: M) -> Result<S>
where
    S: Send,
    I: Fn() -> S + Sync,
    F: Fn(&mut S, u64) -> Result<()> + Sync,
    M: Fn(&mut S, S),
{
    let chunks = CHUNKS.min(trials.max(1));
    let per = trials.div_ceil(chunks);
    let parts: Vec<Result<S>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut s = init();
            for i in c * per..((c + 1) * per).min(trials) {
                step(&mut s, i)?;
            }
            Ok(s)
        })
        .collect();
    let mut total = init();
    for p in parts {
        merge(&mut total, p?);
    }
    Ok(total)
}

fn sample(
    obj: &dyn Objective,
    w: &[f64],
    cfg: &EstimatorConfig,
    seed: u64,
    trial: u64,
) -> Result<Vec<f64>> {
    let perts = cfg.perturbations(seed, trial, w.len());
    Ok(estimate_multiple(obj, w, cfg, &perts, None, &mut FlopCounter::new())?.grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub trials: u64,
    pub mean: Vec<f64>,
    /// `|mean − ∇f|` per coordinate.
    pub deviation: Vec<f64>,
    /// Empirical standard error of the mean per coordinate.
    pub std_error: Vec<f64>,
    /// Largest `deviation / std_error`.
    pub max_z: f64,
    /// Pass at `z_tolerance` standard errors; `None` below 100 trials.
    pub pass: Option<bool>,
}

pub fn verify_unbiasedness(
    obj: &dyn Objective,
    w: &[f64],
    cfg: &EstimatorConfig,
    grad: &[f64],
    trials: u64,
    seed: u64,
    z_tolerance: f64,
) -> Result<UnbiasednessReport> {
    let d = w.len();
    let (sum, sumsq) = chunked(
        trials,
        || (vec![0.0; d], vec![0.0; d]),
        |(s, q), i| {
            let g = sample(obj, w, cfg, seed, i)?;
            for k in 0..d {
                s[k] += g[k];
                q[k] += g[k] * g[k];
            }
            Ok(())
        },
        |(s, q), (s2, q2)| {
            for k in 0..d {
                s[k] += s2[k];
                q[k] += q2[k];
            }
        },
    )?;
    let n = trials as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let deviation: Vec<f64> = mean.iter().zip(grad).map(|(m, g)| (m - g).abs()).collect();
    let std_error: Vec<f64> = (0..d)
        .map(|k| {
            if trials < 2 {
                return f64::NAN;
            }
            let var = ((sumsq[k] - sum[k] * sum[k] / n) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    let max_z = deviation
        .iter()
        .zip(&std_error)
        .map(|(&dv, &se)| if dv == 0.0 { 0.0 } else { dv / se })
        .fold(0.0, f64::max);
    let pass = (trials >= 100).then_some(max_z <= z_tolerance);
    Ok(UnbiasednessReport {
        trials,
        mean,
        deviation,
        std_error,
        max_z,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    /// `E‖ĝ − ∇f‖²` over the trials.
    pub measured: f64,
    /// `(d+1)/n·‖∇f‖²`, plus `ε²·d/n` for zero order.
    pub predicted: f64,
    pub rel_error: f64,
}

pub fn predicted_variance(base: Base, d: usize, n: usize, grad_norm_sq: f64, epsilon: f64) -> f64 {
    let main = (d as f64 + 1.0) / n as f64 * grad_norm_sq;
    match base {
        Base::Fmad => main,
        Base::Zo => main + epsilon * epsilon * d as f64 / n as f64,
    }
}

pub fn verify_variance(
    obj: &dyn Objective,
    w: &[f64],
    cfg: &EstimatorConfig,
    grad: &[f64],
    n_list: &[usize],
    trials: u64,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    let gn: f64 = grad.iter().map(|g| g * g).sum();
    n_list
        .iter()
        .map(|&n| {
            let c = EstimatorConfig { n, ..*cfg };
            let total = chunked(
                trials,
                || 0.0,
                |acc, i| {
                    let g = sample(obj, w, &c, seed, i)?;
                    *acc += g.iter().zip(grad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    Ok(())
                },
                |a, b| *a += b,
            )?;
            let measured = total / trials as f64;
            let predicted = predicted_variance(cfg.base, w.len(), n, gn, cfg.epsilon);
            Ok(VarianceRow {
                n,
                measured,
                predicted,
                rel_error: (measured - predicted).abs() / predicted,
            })
        })
        .collect()
}

/// `E‖ĝ‖²` for single-perturbation estimates.
pub fn second_moment(
    obj: &dyn Objective,
    w: &[f64],
    cfg: &EstimatorConfig,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    let c = EstimatorConfig { n: 1, ..*cfg };
    let total = chunked(
        trials,
        || 0.0,
        |acc, i| {
            let g = sample(obj, w, &c, seed, i)?;
            *acc += g.iter().map(|x| x * x).sum::<f64>();
            Ok(())
        },
        |a, b| *a += b,
    )?;
    Ok(total / trials as f64)
}

/// `E‖ĝ_zo(ε) − ĝ_fmad‖²` with both estimators sharing each direction.
pub fn zo_excess(
    obj: &dyn Objective,
    w: &[f64],
    epsilon: f64,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    let mut zo = EstimatorConfig::new(Base::Zo);
    zo.epsilon = epsilon;
    let fm = EstimatorConfig::new(Base::Fmad);
    let total = chunked(
        trials,
        || 0.0,
        |acc, i| {
            let a = sample(obj, w, &zo, seed, i)?;
            let b = sample(obj, w, &fm, seed, i)?;
            *acc += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            Ok(())
        },
        |a, b| *a += b,
    )?;
    Ok(total / trials as f64)
}

/// Sample mean and variance of `samples` regenerated normals at `σ² = 1`.
pub fn generator_moments(samples: usize, seed: u64) -> (f64, f64) {
    let v = Perturbation::new(seed, samples).regenerate();
    let n = samples as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}
