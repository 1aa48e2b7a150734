//! Training runs with per-iteration telemetry.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::objectives::Problem;
use crate::error::{Error, Result};
use crate::estimate::GradEstimate;
use crate::objective::Objective;
use crate::optim::{bp_max_eta, max_stable_eta, Optimizer, OptimizerConfig};
use crate::reverse_ad::BackwardMode;
use crate::seed;
use crate::tensor::FlopCounter;
use crate::variants::{
    adaptive_next, calibrate, estimate_multiple, estimate_once, sparse_mask, svrg_estimate,
    Accumulator, AdaptiveState, Base, Direction, EstimatorConfig, SvrgState,
};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

const SVRG_SALT: u64 = 0x5356_5247;
const ADAPTIVE_SALT: u64 = 0x4144_4150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Vanilla,
    Multiple,
    Accumulate,
    Adaptive,
    Svrg,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    BpVanilla,
    BpCheckpointing,
    BpAccumulate,
    Estimator(Base, Variant),
}

impl MethodKind {
    pub const ALL: [MethodKind; 15] = [
        MethodKind::BpVanilla,
        MethodKind::BpCheckpointing,
        MethodKind::BpAccumulate,
        MethodKind::Estimator(Base::Zo, Variant::Vanilla),
        MethodKind::Estimator(Base::Zo, Variant::Multiple),
        MethodKind::Estimator(Base::Zo, Variant::Accumulate),
        MethodKind::Estimator(Base::Zo, Variant::Adaptive),
        MethodKind::Estimator(Base::Zo, Variant::Svrg),
        MethodKind::Estimator(Base::Zo, Variant::Sparse),
        MethodKind::Estimator(Base::Fmad, Variant::Vanilla),
        MethodKind::Estimator(Base::Fmad, Variant::Multiple),
        MethodKind::Estimator(Base::Fmad, Variant::Accumulate),
        MethodKind::Estimator(Base::Fmad, Variant::Adaptive),
        MethodKind::Estimator(Base::Fmad, Variant::Svrg),
        MethodKind::Estimator(Base::Fmad, Variant::Sparse),
    ];

    pub fn base(self) -> Option<Base> {
        match self {
            MethodKind::Estimator(b, _) => Some(b),
            _ => None,
        }
    }

    pub fn is_bp(self) -> bool {
        self.base().is_none()
    }

    /// Estimator defaults for this method: ten perturbations for -Multiple,
    /// one otherwise.
    pub fn default_estimator(self) -> EstimatorConfig {
        let mut cfg = EstimatorConfig::new(self.base().unwrap_or(Base::Fmad));
        if let MethodKind::Estimator(_, Variant::Multiple) = self {
            cfg.n = 10;
        }
        cfg
    }

    /// Admissible step-size ceiling for a problem with smoothness `l`.
    pub fn eta_threshold(self, l: f64, d: usize, n: usize) -> f64 {
        if self.is_bp() {
            bp_max_eta(l)
        } else {
            max_stable_eta(l, d, n)
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MethodKind::BpVanilla => "bp-vanilla".to_string(),
            MethodKind::BpCheckpointing => "bp-checkpointing".to_string(),
            MethodKind::BpAccumulate => "bp-accumulate".to_string(),
            MethodKind::Estimator(b, v) => {
                let b = match b {
                    Base::Zo => "zo",
                    Base::Fmad => "fmad",
                };
                let v = match v {
                    Variant::Vanilla => "vanilla",
                    Variant::Multiple => "multiple",
                    Variant::Accumulate => "accumulate",
                    Variant::Adaptive => "adaptive",
                    Variant::Svrg => "svrg",
                    Variant::Sparse => "sparse",
                };
                format!("{b}-{v}")
            }
        };
        f.write_str(&s)
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .iter()
            .copied()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                let all: Vec<String> = MethodKind::ALL.iter().map(|m| m.to_string()).collect();
                Error::Config(format!("unknown method `{s}`; expected one of {}", all.join(", ")))
            })
    }
}

/// Telemetry for one iteration, measured at the iterate `w_t` before the
/// update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: u64,
    /// Full-objective loss.
    pub loss: f64,
    /// Exact `‖∇f(w_t)‖²` of the full objective.
    pub grad_norm_sq: f64,
    /// Mean and max of `|jvp|` over this iteration's perturbations; NaN for
    /// backpropagation.
    pub jvp_mean: f64,
    pub jvp_max: f64,
    /// Gradient-computation FLOPs so far, this iteration included.
    pub flops_cum: u64,
    /// Activation peak of this iteration's gradient computation.
    pub peak_act_units: u64,
    /// `‖Δw‖₂`; zero on iterations that only accumulate.
    pub update_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    pub diverged: bool,
    /// Why the run stopped early, if it did.
    pub divergence: Option<String>,
    /// Loss and squared gradient norm at the final iterate (NaN if diverged).
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub final_params: Vec<f64>,
    /// Number of optimizer updates applied.
    pub updates: usize,
    /// Adaptive calibration found no positive projection.
    pub adaptive_nonpositive: bool,
}

impl RunOutcome {
    pub fn min_grad_norm_sq(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.grad_norm_sq)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn first_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss)
    }
}

/// Everything a run needs besides the problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub method: MethodKind,
    pub optimizer: OptimizerConfig,
    pub estimator: EstimatorConfig,
    /// Segment size for checkpointed backpropagation; `None` is `⌈√D⌉`.
    pub checkpoint_segment: Option<usize>,
    pub iterations: u64,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(method: MethodKind, optimizer: OptimizerConfig, iterations: u64, seed: u64) -> Self {
        Self {
            method,
            optimizer,
            estimator: method.default_estimator(),
            checkpoint_segment: None,
            iterations,
            seed,
        }
    }
}

fn diverging(e: &Error) -> bool {
    matches!(e, Error::Overflow { .. })
}

/// `T` iterations of estimate → step. Divergence (loss above
/// [`DIVERGENCE_LOSS`], or any non-finite value) stops the run and is
/// reported in the outcome rather than as an error.
pub fn convergence_experiment(problem: &Problem, cfg: &RunConfig) -> Result<RunOutcome> {
    let mut est_cfg = cfg.estimator;
    if let Some(b) = cfg.method.base() {
        est_cfg.base = b;
    }
    est_cfg.validate()?;
    let d = problem.dim();
    let mut w = problem.init(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, d)?;
    let accumulating = matches!(
        cfg.method,
        MethodKind::BpAccumulate | MethodKind::Estimator(_, Variant::Accumulate)
    );
    let mut acc = if accumulating {
        Some(Accumulator::new(est_cfg.accumulate_k)?)
    } else {
        None
    };
    let mut svrg: Option<SvrgState> = None;
    let mut adaptive: Option<AdaptiveState> = None;
    let mut last_grad: Vec<f64> = Vec::new();
    let svrg_interval = est_cfg.svrg_interval * problem.iterations_per_epoch();

    let mut out = RunOutcome {
        records: Vec::with_capacity(cfg.iterations as usize),
        diverged: false,
        divergence: None,
        final_loss: f64::NAN,
        final_grad_norm_sq: f64::NAN,
        final_params: Vec::new(),
        updates: 0,
        adaptive_nonpositive: false,
    };
    let mut flops_cum = 0u64;

    for t in 0..cfg.iterations {
        let (loss, gn) = match telemetry(problem.full(), &w) {
            Ok(v) => v,
            Err(e) if diverging(&e) => {
                stop(&mut out, t, f64::INFINITY, e.to_string(), flops_cum);
                break;
            }
            Err(e) => return Err(e),
        };
        if loss > DIVERGENCE_LOSS {
            stop(&mut out, t, loss, format!("loss {loss:e} above threshold"), flops_cum);
            break;
        }

        let batch = problem.batch_objective(t);
        let obj = batch.as_dyn();
        let mut fc = FlopCounter::new();
        let mut mask = None;
        let est: Result<GradEstimate> = match cfg.method {
            MethodKind::BpVanilla => obj.gradient(&w, BackwardMode::Vanilla, &mut fc),
            MethodKind::BpCheckpointing | MethodKind::BpAccumulate => obj.gradient(
                &w,
                BackwardMode::Checkpointed {
                    segment: cfg.checkpoint_segment,
                },
                &mut fc,
            ),
            MethodKind::Estimator(_, variant) => {
                let perts = est_cfg.perturbations(cfg.seed, t, d);
                match variant {
                    Variant::Vanilla | Variant::Multiple | Variant::Accumulate => {
                        estimate_multiple(obj, &w, &est_cfg, &perts, None, &mut fc)
                    }
                    Variant::Sparse => sparse_mask(&w, est_cfg.sparse_fraction).and_then(|m| {
                        let r = estimate_multiple(obj, &w, &est_cfg, &perts, Some(&m), &mut fc);
                        mask = Some(m);
                        r
                    }),
                    Variant::Svrg => (|| {
                        if svrg.as_ref().is_none_or(SvrgState::needs_refresh) {
                            let full_perts: Vec<_> = (0..est_cfg.svrg_n_full as u64)
                                .map(|i| {
                                    crate::zero_order::Perturbation::new(
                                        seed::derive(cfg.seed ^ SVRG_SALT, t, i),
                                        d,
                                    )
                                    .with_sigma2(est_cfg.sigma2)
                                })
                                .collect();
                            svrg = Some(SvrgState::refresh(
                                problem.full(),
                                &w,
                                &est_cfg,
                                &full_perts,
                                svrg_interval,
                                &mut fc,
                            )?);
                        }
                        let state = svrg.as_mut().expect("refreshed above");
                        svrg_estimate(obj, &w, state, &est_cfg, &perts[0], &mut fc)
                    })(),
                    Variant::Adaptive => (|| match adaptive.as_mut() {
                        None => {
                            let cands: Vec<Vec<f64>> = (0..est_cfg.adaptive_calibration as u64)
                                .map(|i| {
                                    crate::zero_order::Perturbation::new(
                                        seed::derive(cfg.seed ^ ADAPTIVE_SALT, t, i),
                                        d,
                                    )
                                    .with_sigma2(est_cfg.sigma2)
                                    .regenerate()
                                })
                                .collect();
                            let (state, e) = calibrate(obj, &w, &est_cfg, &cands, &mut fc)?;
                            out.adaptive_nonpositive = state.nonpositive_calibration;
                            adaptive = Some(state);
                            Ok(e)
                        }
                        Some(state) => {
                            let v_new = perts[0].regenerate();
                            let dir = adaptive_next(state, &last_grad, &v_new);
                            estimate_once(obj, &w, &est_cfg, Direction::Explicit(&dir), None, &mut fc)
                        }
                    })(),
                }
            }
        };
        let est = match est {
            Ok(e) => e,
            Err(e) if diverging(&e) => {
                stop(&mut out, t, loss, e.to_string(), flops_cum + fc.total());
                break;
            }
            Err(e) => return Err(e),
        };
        flops_cum += fc.total();

        let update = match acc.as_mut() {
            Some(a) => a.push(&est.grad),
            None => Some(est.grad.clone()),
        };
        let mut update_norm = 0.0;
        if let Some(g) = update {
            match opt.step(&mut w, &g, mask.as_deref()) {
                Ok(info) => {
                    update_norm = info.update_norm;
                    out.updates += 1;
                }
                Err(e) if diverging(&e) => {
                    stop(&mut out, t, loss, e.to_string(), flops_cum);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let (jvp_mean, jvp_max) = est.jvp_stats();
        out.records.push(RunRecord {
            iter: t,
            loss,
            grad_norm_sq: gn,
            jvp_mean,
            jvp_max,
            flops_cum,
            peak_act_units: est.peak_act_units,
            update_norm,
        });
        last_grad = est.grad;
    }

    if !out.diverged {
        match telemetry(problem.full(), &w) {
            Ok((l, g)) if l <= DIVERGENCE_LOSS => {
                out.final_loss = l;
                out.final_grad_norm_sq = g;
            }
            Ok((l, _)) => {
                out.diverged = true;
                out.divergence = Some(format!("final loss {l:e} above threshold"));
            }
            Err(e) if diverging(&e) => {
                out.diverged = true;
                out.divergence = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    out.final_params = w;
    Ok(out)
}

fn stop(out: &mut RunOutcome, t: u64, loss: f64, why: String, flops_cum: u64) {
    out.records.push(RunRecord {
        iter: t,
        loss,
        grad_norm_sq: f64::NAN,
        jvp_mean: f64::NAN,
        jvp_max: f64::NAN,
        flops_cum,
        peak_act_units: 0,
        update_norm: 0.0,
    });
    out.diverged = true;
    out.divergence = Some(why);
}

/// Full-objective loss and squared gradient norm, charged to a scratch
/// counter so telemetry never shows up in the cost columns.
pub fn telemetry(obj: &dyn Objective, w: &[f64]) -> Result<(f64, f64)> {
    let g = obj.gradient(w, BackwardMode::Vanilla, &mut FlopCounter::new())?;
    let gn = g.grad.iter().map(|x| x * x).sum::<f64>();
    Ok((g.loss, gn))
}

/// Result of a step-size search.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuning {
    pub eta: f64,
    pub threshold: f64,
    /// `(factor, final loss)` per candidate; diverged runs score `+∞`.
    pub scores: Vec<(f64, f64)>,
}

/// Picks `factor·threshold` with the lowest final loss on a tuning seed,
/// where the threshold is the method's admissible step-size ceiling.
pub fn tune_eta(
    problem: &Problem,
    base: &RunConfig,
    factors: &[f64],
    tuning_seed: u64,
) -> Result<Tuning> {
    let l = problem
        .smoothness()
        .ok_or_else(|| Error::Config("step-size tuning needs a known smoothness constant".into()))?;
    let n = if base.method.is_bp() { 1 } else { base.estimator.n };
    let threshold = base.method.eta_threshold(l, problem.dim(), n);
    let mut scores = Vec::with_capacity(factors.len());
    for &f in factors {
        let mut cfg = *base;
        cfg.optimizer.eta = f * threshold;
        cfg.seed = tuning_seed;
        let o = convergence_experiment(problem, &cfg)?;
        let score = if o.diverged || !o.final_loss.is_finite() {
            f64::INFINITY
        } else {
            o.final_loss
        };
        scores.push((f, score));
    }
    let (best, _) = scores
        .iter()
        .copied()
        .fold((factors[0], f64::INFINITY), |b, s| if s.1 < b.1 { s } else { b });
    Ok(Tuning {
        eta: best * threshold,
        threshold,
        scores,
    })
}
