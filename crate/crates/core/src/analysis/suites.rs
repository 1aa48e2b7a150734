//! Self-verification suites. Each check reports what it measured, what the
//! theory predicts and the tolerance it was judged at.

use serde::{Deserialize, Serialize};

use super::bounds::{check_bound, theorem_bound, BoundInputs, BoundMethod};
use super::checks::{
    generator_moments, log_log_slope, second_moment, verify_unbiasedness, verify_variance,
    zo_excess,
};
use super::experiment::{convergence_experiment, MethodKind, RunConfig, Variant};
use super::objectives::{ObjectiveSpec, Problem};
use crate::error::{Error, Result};
use crate::nn::{init_params, Batch, InitScheme, LossSpec, Model, Target};
use crate::objective::{Linear, ModelObjective, Objective, Quadratic};
use crate::optim::{max_stable_eta, OptimizerConfig};
use crate::reverse_ad::BackwardMode;
use crate::tensor::{matmul, FlopCounter, Tensor};
use crate::variants::{estimate_multiple, Base, EstimatorConfig, Mode};
use crate::zero_order::{zo_estimate_dir, Perturbation, ZoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Lemmas,
    Theorems,
    Accounting,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemmas" => Ok(Suite::Lemmas),
            "theorems" => Ok(Suite::Theorems),
            "accounting" => Ok(Suite::Accounting),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite `{other}` (expected lemmas, theorems, accounting or all)"
            ))),
        }
    }
}

/// How `measured` is compared with `predicted`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `|m − p| ≤ tol`
    Abs,
    /// `|m − p| ≤ tol·|p|`
    Rel,
    /// `m ≤ p + tol`
    AtMost,
    /// `m ≥ p − tol`
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub measured: f64,
    pub predicted: f64,
    pub comparison: Comparison,
    pub tolerance: f64,
    pub pass: bool,
}

struct Recorder {
    suite: &'static str,
    scale: f64,
    out: Vec<CheckResult>,
}

impl Recorder {
    fn check(&mut self, name: impl Into<String>, measured: f64, predicted: f64, cmp: Comparison, tol: f64) {
        let tolerance = tol * self.scale;
        let pass = match cmp {
            Comparison::Abs => (measured - predicted).abs() <= tolerance,
            Comparison::Rel => (measured - predicted).abs() <= tolerance * predicted.abs(),
            Comparison::AtMost => measured <= predicted + tolerance,
            Comparison::AtLeast => measured >= predicted - tolerance,
        };
        self.out.push(CheckResult {
            suite: self.suite.to_string(),
            name: name.into(),
            measured,
            predicted,
            comparison: cmp,
            tolerance,
            pass,
        });
    }

    fn flag(&mut self, name: impl Into<String>, ok: bool) {
        self.check(name, if ok { 1.0 } else { 0.0 }, 1.0, Comparison::Abs, 0.0);
    }
}

/// Runs a suite. `tolerance_scale` multiplies every tolerance; exact checks
/// have tolerance zero and are unaffected.
pub fn run_suite(suite: Suite, tolerance_scale: f64) -> Result<Vec<CheckResult>> {
    Ok(match suite {
        Suite::Lemmas => lemmas(tolerance_scale)?,
        Suite::Theorems => theorems(tolerance_scale)?,
        Suite::Accounting => accounting(tolerance_scale)?,
        Suite::All => {
            let mut v = lemmas(tolerance_scale)?;
            v.extend(theorems(tolerance_scale)?);
            v.extend(accounting(tolerance_scale)?);
            v
        }
    })
}

/// Unit-norm linear objective `g = e₁` in `d` dimensions.
fn unit_linear(d: usize) -> Linear {
    let mut g = vec![0.0; d];
    g[0] = 1.0;
    Linear::new(g).expect("non-empty")
}

/// Small tanh regression network used wherever a smooth non-quadratic
/// objective is needed.
pub fn smooth_mlp(seed: u64) -> Result<(ModelObjective, Vec<f64>)> {
    let model = Model::parse("linear:3:6,tanh,linear:6:4,softplus,linear:4:2")?;
    let x = Tensor::new(vec![5, 3], Perturbation::new(seed ^ 0xA1, 15).regenerate())?;
    let y = Tensor::new(vec![5, 2], Perturbation::new(seed ^ 0xB2, 10).regenerate())?;
    let obj = ModelObjective::new(model.clone(), Batch::new(x, Target::Dense(y))?, LossSpec::Mse)?;
    let w = init_params(&model, seed, InitScheme::ScaledUniform).into_vec();
    Ok((obj, w))
}

fn lemmas(scale: f64) -> Result<Vec<CheckResult>> {
    let mut r = Recorder {
        suite: "lemmas",
        scale,
        out: Vec::new(),
    };
    let (mean, var) = generator_moments(1_000_000, 12345);
    r.check("generator mean (1e6 draws)", mean, 0.0, Comparison::Abs, 0.01);
    r.check("generator variance (1e6 draws)", var, 1.0, Comparison::Abs, 0.01);

    for d in [3usize, 10] {
        let obj = unit_linear(d);
        let w = vec![0.0; d];
        for (base, eps) in [(Base::Fmad, 1e-3), (Base::Zo, 1e-4)] {
            let tag = match base {
                Base::Fmad => "fmad".to_string(),
                Base::Zo => format!("zo eps={eps:e}"),
            };
            let mut cfg = EstimatorConfig::new(base);
            cfg.epsilon = eps;
            let u = verify_unbiasedness(&obj, &w, &cfg, obj.grad(), 100_000, 7 + d as u64, 3.0)?;
            r.check(
                format!("unbiasedness {tag} d={d}: max |mean-grad|/stderr"),
                u.max_z,
                0.0,
                Comparison::AtMost,
                3.0,
            );
            for row in verify_variance(&obj, &w, &cfg, obj.grad(), &[1, 4, 16], 100_000, 11 + d as u64)? {
                r.check(
                    format!("variance {tag} d={d} n={}", row.n),
                    row.measured,
                    row.predicted,
                    Comparison::Rel,
                    0.10,
                );
            }
        }
        let m2 = second_moment(&obj, &w, &EstimatorConfig::new(Base::Fmad), 1_000_000, 13 + d as u64)?;
        r.check(
            format!("second moment fmad d={d}"),
            m2,
            d as f64 + 2.0,
            Comparison::Rel,
            0.05,
        );
    }

    let (mlp, w) = smooth_mlp(3)?;
    let eps = [1e-2, 1e-3, 1e-4];
    let excess: Vec<f64> = eps
        .iter()
        .map(|&e| zo_excess(&mlp, &w, e, 2_000, 17))
        .collect::<Result<_>>()?;
    r.check(
        "zo variance excess over fmad shrinks at least as eps^2 (log-log slope)",
        log_log_slope(&eps, &excess),
        2.0,
        Comparison::AtLeast,
        0.2,
    );

    let mut worst = 0.0f64;
    for s in 0..20u64 {
        let (o, w) = smooth_mlp(100 + s)?;
        let g = o.gradient(&w, BackwardMode::Vanilla, &mut FlopCounter::new())?;
        let v = Perturbation::new(500 + s, w.len()).regenerate();
        let j = o.jvp(&w, &v, &mut FlopCounter::new())?.jvp;
        let dot: f64 = g.grad.iter().zip(&v).map(|(a, b)| a * b).sum();
        worst = worst.max((j - dot).abs() / dot.abs().max(1e-12));
    }
    r.check("jvp vs dot(bp gradient, v) max rel error", worst, 0.0, Comparison::AtMost, 1e-10);

    let v = Perturbation::new(901, w.len()).regenerate();
    let j = mlp.jvp(&w, &v, &mut FlopCounter::new())?.jvp;
    let errs: Vec<f64> = eps
        .iter()
        .map(|&e| {
            zo_estimate_dir(&mlp, &w, &v, ZoConfig::new(e)?, &mut FlopCounter::new())
                .map(|g| (g.jvps[0] - j).abs())
        })
        .collect::<Result<_>>()?;
    r.check("zo scalar vs jvp log-log slope", log_log_slope(&eps, &errs), 2.0, Comparison::Abs, 0.2);

    let q = Quadratic::ill_conditioned(1.0, 10.0, 8)?;
    let qw = Perturbation::new(5, 8).regenerate();
    let qv = Perturbation::new(6, 8).regenerate();
    let qj = q.jvp(&qw, &qv, &mut FlopCounter::new())?.jvp;
    let mut qerr = 0.0f64;
    for e in eps {
        let s = zo_estimate_dir(&q, &qw, &qv, ZoConfig::new(e)?, &mut FlopCounter::new())?.jvps[0];
        qerr = qerr.max((s - qj).abs());
    }
    r.check("zo exact on quadratics", qerr, 0.0, Comparison::AtMost, 1e-12);
    Ok(r.out)
}

fn quadratic_runs(method: MethodKind, eta: f64, n: usize, t: u64, seeds: u64) -> Result<Vec<super::RunOutcome>> {
    let p = Problem::build(&ObjectiveSpec::Quadratic { l: 1.0, d: 100, kappa: 1.0 }, 0)?;
    (0..seeds)
        .map(|s| {
            let mut cfg = RunConfig::new(method, OptimizerConfig::sgd(eta), t, s);
            cfg.estimator.n = n;
            convergence_experiment(&p, &cfg)
        })
        .collect()
}

/// Decreasing trend: the last tenth of the gradient norms averages below
/// the first tenth.
pub fn decreasing_trend(o: &super::RunOutcome) -> bool {
    let g: Vec<f64> = o.records.iter().map(|r| r.grad_norm_sq).collect();
    let k = (g.len() / 10).max(1);
    if g.len() < 2 * k {
        return false;
    }
    let head = g[..k].iter().sum::<f64>() / k as f64;
    let tail = g[g.len() - k..].iter().sum::<f64>() / k as f64;
    tail < head
}

fn theorems(scale: f64) -> Result<Vec<CheckResult>> {
    let mut r = Recorder {
        suite: "theorems",
        scale,
        out: Vec::new(),
    };
    let runs = quadratic_runs(MethodKind::BpVanilla, 1.0, 1, 100, 5)?;
    let mins: Vec<f64> = runs.iter().map(|o| o.min_grad_norm_sq()).collect();
    let mut bound_rhs = 0.0;
    for o in &runs {
        bound_rhs += theorem_bound(
            BoundMethod::Bp,
            BoundInputs {
                l: 1.0,
                eta: 1.0,
                d: 100,
                n: 1,
                t: 100,
                f_first: o.first_loss(),
                f_last: o.final_loss,
                epsilon: 0.0,
            },
        )?
        .rhs;
    }
    bound_rhs /= runs.len() as f64;
    let mean_min = mins.iter().sum::<f64>() / mins.len() as f64;
    r.check("exact gd bound (5 seeds)", mean_min, bound_rhs, Comparison::AtMost, 0.0);
    let one = quadratic_runs(MethodKind::BpVanilla, 1.0, 1, 1, 1)?;
    let jump = one[0].final_params.iter().map(|x| x.abs()).fold(0.0, f64::max);
    r.check("gd with eta=1/L reaches the minimum in one step", jump, 0.0, Comparison::Abs, 0.0);

    for base in [Base::Fmad, Base::Zo] {
        let name = if base == Base::Fmad { "fmad" } else { "zo" };
        let method = MethodKind::Estimator(base, Variant::Vanilla);
        for n in [1usize, 10] {
            let thr = max_stable_eta(1.0, 100, n);
            let good = quadratic_runs(method, 0.5 * thr, n, 1000, 5)?;
            let converged = good.iter().filter(|o| !o.diverged && decreasing_trend(o)).count();
            r.check(
                format!("{name} n={n} converges at 0.5x threshold (seeds of 5)"),
                converged as f64,
                4.0,
                Comparison::AtLeast,
                0.0,
            );
            let bm = if base == Base::Fmad { BoundMethod::Fmad } else { BoundMethod::Zo };
            let mut rhs = 0.0;
            for o in &good {
                rhs += theorem_bound(
                    bm,
                    BoundInputs {
                        l: 1.0,
                        eta: 0.5 * thr,
                        d: 100,
                        n,
                        t: 1000,
                        f_first: o.first_loss(),
                        f_last: o.final_loss,
                        epsilon: 1e-3,
                    },
                )?
                .rhs;
            }
            let bound = theorem_bound(
                bm,
                BoundInputs {
                    l: 1.0,
                    eta: 0.5 * thr,
                    d: 100,
                    n,
                    t: 1000,
                    f_first: 0.0,
                    f_last: 0.0,
                    epsilon: 1e-3,
                },
            )?;
            let averaged = super::TheoryBound {
                rhs: rhs / good.len() as f64,
                ..bound
            };
            let mins: Vec<f64> = good.iter().map(|o| o.min_grad_norm_sq()).collect();
            r.flag(format!("{name} n={n} bound holds (5 seeds)"), check_bound(&mins, &averaged));
            let bad = quadratic_runs(method, 4.0 * thr, n, 1000, 5)?;
            let diverged = bad.iter().filter(|o| o.diverged).count();
            r.check(
                format!("{name} n={n} diverges at 4x threshold (seeds of 5)"),
                diverged as f64,
                4.0,
                Comparison::AtLeast,
                0.0,
            );
        }
    }
    r.flag(
        "threshold widens with n: max_stable_eta(n=10) > max_stable_eta(n=1)",
        max_stable_eta(1.0, 100, 10) > max_stable_eta(1.0, 100, 1),
    );
    let bound_at = |d: usize, n: usize| {
        theorem_bound(
            BoundMethod::Fmad,
            BoundInputs {
                l: 1.0,
                eta: 1e-3,
                d,
                n,
                t: 100,
                f_first: 1.0,
                f_last: 0.0,
                epsilon: 0.0,
            },
        )
        .map(|b| b.rhs)
    };
    r.flag(
        "bound grows with d and shrinks with n",
        bound_at(100, 1)? > bound_at(10, 1)? && bound_at(100, 10)? < bound_at(100, 1)?,
    );
    Ok(r.out)
}

fn chain(depth: usize, width: usize) -> Result<Model> {
    let spec: Vec<String> = (0..depth)
        .map(|i| {
            if i % 2 == 0 {
                format!("linear:{width}:{width}")
            } else {
                "tanh".to_string()
            }
        })
        .collect();
    Model::parse(&spec.join(","))
}

fn random_batch(model: &Model, rows: usize, seed: u64) -> Result<Batch> {
    let inw = model
        .input_width()
        .ok_or_else(|| Error::Model("benchmark model needs a linear layer".into()))?;
    let outw = *model.widths(inw)?.last().expect("non-empty");
    Batch::new(
        Tensor::new(vec![rows, inw], Perturbation::new(seed, rows * inw).regenerate())?,
        Target::Dense(Tensor::new(
            vec![rows, outw],
            Perturbation::new(seed + 1, rows * outw).regenerate(),
        )?),
    )
}

/// Per-iteration FLOPs of the cost benchmark: a ReLU network
/// 32-64-64-64-10 on a batch of 32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBenchmark {
    pub bp_checkpointing: u64,
    pub zo_vanilla: u64,
    pub fmad_vanilla: u64,
    pub zo_multiple: u64,
    pub fmad_multiple: u64,
}

pub const BENCHMARK_MODEL: &str = "linear:32:64,relu,linear:64:64,relu,linear:64:64,relu,linear:64:10";
pub const BENCHMARK_BATCH: usize = 32;

pub fn cost_benchmark() -> Result<CostBenchmark> {
    let model = Model::parse(BENCHMARK_MODEL)?;
    let obj = ModelObjective::new(model.clone(), random_batch(&model, BENCHMARK_BATCH, 40)?, LossSpec::Mse)?;
    let w = init_params(&model, 41, InitScheme::ScaledUniform).into_vec();
    let d = w.len();
    let flops = |base: Base, n: usize| -> Result<u64> {
        let cfg = EstimatorConfig::new(base);
        let perts: Vec<Perturbation> = (0..n as u64).map(|i| Perturbation::new(60 + i, d)).collect();
        Ok(estimate_multiple(&obj, &w, &cfg, &perts, None, &mut FlopCounter::new())?.flops)
    };
    Ok(CostBenchmark {
        bp_checkpointing: obj
            .gradient(&w, BackwardMode::Checkpointed { segment: None }, &mut FlopCounter::new())?
            .flops,
        zo_vanilla: flops(Base::Zo, 1)?,
        fmad_vanilla: flops(Base::Fmad, 1)?,
        zo_multiple: flops(Base::Zo, 10)?,
        fmad_multiple: flops(Base::Fmad, 10)?,
    })
}

fn accounting(scale: f64) -> Result<Vec<CheckResult>> {
    let mut r = Recorder {
        suite: "accounting",
        scale,
        out: Vec::new(),
    };
    let mut exact = true;
    for (m, k, n) in [(1, 4, 3), (3, 7, 2), (16, 16, 16), (5, 1, 9)] {
        let a = Tensor::zeros(vec![m, k])?;
        let b = Tensor::zeros(vec![k, n])?;
        let mut fc = FlopCounter::new();
        matmul(&a, &b, &mut fc)?;
        exact &= fc.total() == (2 * m * k * n) as u64;
    }
    r.flag("matmul charges 2mkn", exact);

    for depth in [16usize, 64, 256] {
        let width = 8;
        let model = chain(depth, width)?;
        let batch = random_batch(&model, 1, depth as u64)?;
        let w = init_params(&model, 3, InitScheme::ScaledUniform).into_vec();
        let obj = ModelObjective::new(model, batch, LossSpec::Mse)?;
        let v = obj.gradient(&w, BackwardMode::Vanilla, &mut FlopCounter::new())?;
        let c = obj.gradient(&w, BackwardMode::Checkpointed { segment: None }, &mut FlopCounter::new())?;
        let s = (depth as f64).sqrt().ceil() as usize;
        r.check(
            format!("vanilla peak = c*D (D={depth})"),
            v.peak_act_units as f64,
            (width * depth) as f64,
            Comparison::Abs,
            0.0,
        );
        r.check(
            format!("checkpointed peak = (ceil(D/s)+s)*c (D={depth})"),
            c.peak_act_units as f64,
            ((depth.div_ceil(s) + s) * width) as f64,
            Comparison::Abs,
            0.0,
        );
        let rel = v
            .grad
            .iter()
            .zip(&c.grad)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1e-300))
            .fold(0.0, f64::max);
        r.check(format!("checkpointed gradient equals vanilla (D={depth})"), rel, 0.0, Comparison::AtMost, 1e-12);
    }

    let b = cost_benchmark()?;
    let bp = b.bp_checkpointing as f64;
    r.check(
        "zo-vanilla / bp-checkpointing flops in [0.5, 0.8]",
        b.zo_vanilla as f64 / bp,
        0.65,
        Comparison::Abs,
        0.15,
    );
    r.check(
        "fmad-vanilla / bp-checkpointing flops in [0.9, 1.1]",
        b.fmad_vanilla as f64 / bp,
        1.0,
        Comparison::Abs,
        0.1,
    );
    r.check(
        "zo-multiple(10) / zo-vanilla flops",
        b.zo_multiple as f64 / b.zo_vanilla as f64,
        10.0,
        Comparison::Rel,
        0.01,
    );
    r.check(
        "fmad-multiple(10) / fmad-vanilla flops",
        b.fmad_multiple as f64 / b.fmad_vanilla as f64,
        10.0,
        Comparison::Rel,
        0.01,
    );

    let model = Model::parse(BENCHMARK_MODEL)?;
    let obj = ModelObjective::new(model.clone(), random_batch(&model, 8, 70)?, LossSpec::Mse)?;
    let w = init_params(&model, 71, InitScheme::ScaledUniform).into_vec();
    for base in [Base::Fmad, Base::Zo] {
        let name = if base == Base::Fmad { "fmad" } else { "zo" };
        let mut seq = EstimatorConfig::new(base);
        let single = estimate_multiple(&obj, &w, &seq, &[Perturbation::new(1, w.len())], None, &mut FlopCounter::new())?;
        for n in [2usize, 10] {
            let perts: Vec<Perturbation> = (0..n as u64).map(|i| Perturbation::new(80 + i, w.len())).collect();
            seq.mode = Mode::Sequential;
            let s = estimate_multiple(&obj, &w, &seq, &perts, None, &mut FlopCounter::new())?;
            let par = EstimatorConfig {
                mode: Mode::Parallel,
                ..seq
            };
            let p = estimate_multiple(&obj, &w, &par, &perts, None, &mut FlopCounter::new())?;
            r.check(
                format!("{name} parallel peak = n x sequential (n={n})"),
                p.peak_act_units as f64,
                (n as u64 * s.peak_act_units) as f64,
                Comparison::Abs,
                0.0,
            );
            r.check(
                format!("{name} sequential multiple peak = vanilla peak (n={n})"),
                s.peak_act_units as f64,
                single.peak_act_units as f64,
                Comparison::Abs,
                0.0,
            );
            r.flag(format!("{name} parallel and sequential gradients bit-identical (n={n})"), s.grad == p.grad);
        }
    }
    Ok(r.out)
}
