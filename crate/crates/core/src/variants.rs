//! Variance-reduction wrappers over the forward-mode and zero-order
//! estimators: perturbation averaging, accumulation, adaptive directions,
//! SVRG control variates and magnitude-sparse masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::GradEstimate;
use crate::forward_ad;
use crate::objective::Objective;
use crate::seed;
use crate::tensor::FlopCounter;
use crate::zero_order::{self, Perturbation, ZoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Base {
    Fmad,
    Zo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub base: Base,
    /// Perturbations averaged per iteration.
    pub n: usize,
    pub mode: Mode,
    pub accumulate_k: usize,
    /// Snapshot refresh period in epochs.
    pub svrg_interval: usize,
    /// Perturbations used for the snapshot gradient.
    pub svrg_n_full: usize,
    pub sparse_fraction: f64,
    pub adaptive_calibration: usize,
    pub rolling_beta: f64,
    pub epsilon: f64,
    pub sigma2: f64,
}

impl EstimatorConfig {
    pub fn new(base: Base) -> Self {
        Self {
            base,
            n: 1,
            mode: Mode::Sequential,
            accumulate_k: 100,
            svrg_interval: 5,
            svrg_n_full: 10,
            sparse_fraction: 0.01,
            adaptive_calibration: 4,
            rolling_beta: 0.5,
            epsilon: zero_order::DEFAULT_EPSILON,
            sigma2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.accumulate_k == 0 {
            return bad("accumulation window must be at least 1".into());
        }
        if self.svrg_interval == 0 || self.svrg_n_full == 0 {
            return bad("svrg interval and snapshot perturbations must be positive".into());
        }
        if !(self.sparse_fraction > 0.0 && self.sparse_fraction <= 1.0) {
            return bad(format!("sparse fraction {} outside (0, 1]", self.sparse_fraction));
        }
        if self.adaptive_calibration == 0 {
            return bad("adaptive calibration needs at least one candidate".into());
        }
        if !(0.0..=1.0).contains(&self.rolling_beta) {
            return bad(format!("rolling beta {} outside [0, 1]", self.rolling_beta));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        ZoConfig::new(self.epsilon)?;
        Ok(())
    }

    /// The `n` perturbations of iteration `t` in a run seeded with `base`.
    pub fn perturbations(&self, base: u64, t: u64, dim: usize) -> Vec<Perturbation> {
        (0..self.n as u64)
            .map(|i| Perturbation::new(seed::derive(base, t, i), dim).with_sigma2(self.sigma2))
            .collect()
    }
}

/// Where a single estimate takes its direction from.
#[derive(Debug, Clone, Copy)]
pub enum Direction<'a> {
    Seeded(&'a Perturbation),
    Explicit(&'a [f64]),
}

/// One base estimate, optionally restricted to the coordinates in `mask`.
pub fn estimate_once(
    obj: &dyn Objective,
    w: &[f64],
    cfg: &EstimatorConfig,
    dir: Direction<'_>,
    mask: Option<&[usize]>,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    let masked;
    let dir = match (dir, mask) {
        (Direction::Seeded(p), Some(m)) => {
            let mut v = p.regenerate();
            apply_mask(&mut v, m);
            masked = v;
            Direction::Explicit(&masked)
        }
        (Direction::Explicit(v), Some(m)) => {
            let mut v = v.to_vec();
            apply_mask(&mut v, m);
            masked = v;
            Direction::Explicit(&masked)
        }
        (d, None) => d,
    };
    let zo = ZoConfig::new(cfg.epsilon)?;
    match (cfg.base, dir) {
        (Base::Fmad, Direction::Seeded(p)) => forward_ad::forward_gradient(obj, w, p, fc),
        (Base::Fmad, Direction::Explicit(v)) => forward_ad::forward_gradient_dir(obj, w, v, fc),
        (Base::Zo, Direction::Seeded(p)) => zero_order::zo_estimate(obj, w, p, zo, fc),
        (Base::Zo, Direction::Explicit(v)) => zero_order::zo_estimate_dir(obj, w, v, zo, fc),
    }
}

/// Mean of one base estimate per perturbation.
///
/// Sequential mode evaluates one perturbation at a time; parallel mode runs
/// them concurrently, each worker holding its own activations. The sum is
/// formed in perturbation order either way, so both modes return the same
/// bits.
pub fn estimate_multiple(
    obj: &dyn Objective,
    w: &[f64],
    cfg: &EstimatorConfig,
    perts: &[Perturbation],
    mask: Option<&[usize]>,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    if perts.is_empty() {
        return Err(Error::Config("at least one perturbation is required".into()));
    }
    let one = |i: usize, p: &Perturbation, fc: &mut FlopCounter| {
        estimate_once(obj, w, cfg, Direction::Seeded(p), mask, fc)
            .map_err(|e| e.with_context(format!("perturbation {i}")))
    };
    let start = fc.total();
    let (mut acc, peak) = match cfg.mode {
        Mode::Sequential => {
            let mut acc: Option<GradEstimate> = None;
            let mut peak = 0;
            for (i, p) in perts.iter().enumerate() {
                let e = one(i, p, fc)?;
                peak = e.peak_act_units.max(peak);
                acc = Some(match acc {
                    None => e,
                    Some(a) => fold(a, e, fc),
                });
            }
            (acc.expect("non-empty"), peak)
        }
        Mode::Parallel => {
            let results: Vec<Result<(GradEstimate, FlopCounter)>> = perts
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut local = FlopCounter::new();
                    one(i, p, &mut local).map(|e| (e, local))
                })
                .collect();
            let mut acc: Option<GradEstimate> = None;
            let mut peak = 0;
            for r in results {
                let (e, local) = r?;
                fc.merge(&local);
                // every worker holds its activations at the same time
                peak += e.peak_act_units;
                acc = Some(match acc {
                    None => e,
                    Some(a) => fold(a, e, fc),
                });
            }
            (acc.expect("non-empty"), peak)
        }
    };
    let n = perts.len();
    if n > 1 {
        let inv = 1.0 / n as f64;
        for g in &mut acc.grad {
            *g *= inv;
        }
        fc.add(acc.grad.len() as u64);
    }
    acc.n = n;
    acc.flops = fc.since(start);
    acc.peak_act_units = peak;
    Ok(acc)
}

fn fold(mut acc: GradEstimate, e: GradEstimate, fc: &mut FlopCounter) -> GradEstimate {
    for (a, g) in acc.grad.iter_mut().zip(&e.grad) {
        *a += g;
    }
    fc.add(acc.grad.len() as u64);
    acc.jvps.extend(e.jvps);
    acc
}

/// Averages gradients over a window of `k` calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    k: usize,
    sum: Vec<f64>,
    count: usize,
    emitted: usize,
}

impl Accumulator {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("accumulation window must be at least 1".into()));
        }
        Ok(Self {
            k,
            sum: Vec::new(),
            count: 0,
            emitted: 0,
        })
    }

    /// Adds one gradient; every `k`-th call returns the window mean.
    pub fn push(&mut self, grad: &[f64]) -> Option<Vec<f64>> {
        if self.count == 0 {
            self.sum.clear();
            self.sum.extend_from_slice(grad);
        } else {
            for (s, g) in self.sum.iter_mut().zip(grad) {
                *s += g;
            }
        }
        self.count += 1;
        if self.count < self.k {
            return None;
        }
        self.count = 0;
        self.emitted += 1;
        if self.k == 1 {
            return Some(self.sum.clone());
        }
        let inv = 1.0 / self.k as f64;
        Some(self.sum.iter().map(|s| s * inv).collect())
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }
}

pub fn accumulate_step(acc: &mut Accumulator, est: &GradEstimate) -> Option<Vec<f64>> {
    acc.push(&est.grad)
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        Some(v.iter().map(|x| x / norm).collect())
    } else {
        None
    }
}

/// Running direction for the adaptive variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    direction: Vec<f64>,
    beta: f64,
    /// Set when no calibration candidate had a positive projection.
    pub nonpositive_calibration: bool,
}

impl AdaptiveState {
    /// Unit-norm running direction.
    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Calibration: estimates along every candidate and keeps the one with the
/// largest projected scalar. Returns the state and the chosen estimate.
pub fn calibrate(
    obj: &dyn Objective,
    w: &[f64],
    cfg: &EstimatorConfig,
    candidates: &[Vec<f64>],
    fc: &mut FlopCounter,
) -> Result<(AdaptiveState, GradEstimate)> {
    let mut best: Option<(usize, GradEstimate)> = None;
    for (i, v) in candidates.iter().enumerate() {
        let e = estimate_once(obj, w, cfg, Direction::Explicit(v), None, fc)
            .map_err(|e| e.with_context(format!("calibration candidate {i}")))?;
        if best.as_ref().is_none_or(|(_, b)| e.jvps[0] > b.jvps[0]) {
            best = Some((i, e));
        }
    }
    let (i, est) = best.ok_or_else(|| Error::Config("no calibration candidates".into()))?;
    let direction = normalize(&candidates[i])
        .ok_or_else(|| Error::Config("calibration candidate has zero norm".into()))?;
    Ok((
        AdaptiveState {
            direction,
            beta: cfg.rolling_beta,
            nonpositive_calibration: est.jvps[0] <= 0.0,
        },
        est,
    ))
}

/// Next sampling direction: `normalize(β·h + (1−β)·v̂_new)·√d`, where `h` is
/// the normalized last gradient estimate (or the running direction when that
/// estimate vanished) and `v̂_new` the normalized fresh draw.
pub fn adaptive_next(state: &mut AdaptiveState, last_grad: &[f64], v_new: &[f64]) -> Vec<f64> {
    let d = v_new.len();
    let h = normalize(last_grad).unwrap_or_else(|| state.direction.clone());
    let fresh = normalize(v_new).unwrap_or_else(|| state.direction.clone());
    let beta = state.beta;
    let mixed: Vec<f64> = h
        .iter()
        .zip(&fresh)
        .map(|(a, b)| beta * a + (1.0 - beta) * b)
        .collect();
    // opposite unit vectors cancel at β = ½; keep the history then
    state.direction = normalize(&mixed).unwrap_or(h);
    let scale = (d as f64).sqrt();
    state.direction.iter().map(|x| x * scale).collect()
}

/// Snapshot point `w̃`, its gradient estimate `μ` and the iterations since.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrgState {
    snapshot: Vec<f64>,
    mu: Vec<f64>,
    age: usize,
    interval: usize,
}

impl SvrgState {
    /// `μ` is the mean of `perts.len()` base estimates on the full objective.
    pub fn refresh(
        full: &dyn Objective,
        w: &[f64],
        cfg: &EstimatorConfig,
        perts: &[Perturbation],
        interval: usize,
        fc: &mut FlopCounter,
    ) -> Result<Self> {
        let seq = EstimatorConfig {
            mode: Mode::Sequential,
            ..*cfg
        };
        let mu = estimate_multiple(full, w, &seq, perts, None, fc)?.grad;
        Ok(Self {
            snapshot: w.to_vec(),
            mu,
            age: 0,
            interval,
        })
    }

    pub fn snapshot(&self) -> &[f64] {
        &self.snapshot
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn age(&self) -> usize {
        self.age
    }

    pub fn needs_refresh(&self) -> bool {
        self.age >= self.interval
    }
}

/// `ĝ = g_v(w) − g_v(w̃) + μ` with one shared direction.
pub fn svrg_estimate(
    obj: &dyn Objective,
    w: &[f64],
    state: &mut SvrgState,
    cfg: &EstimatorConfig,
    p: &Perturbation,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    if state.age > state.interval {
        return Err(Error::StaleSnapshot {
            age: state.age,
            interval: state.interval,
        });
    }
    let start = fc.total();
    let mut cur = estimate_once(obj, w, cfg, Direction::Seeded(p), None, fc)?;
    let snap = estimate_once(obj, &state.snapshot, cfg, Direction::Seeded(p), None, fc)
        .map_err(|e| e.with_context("snapshot"))?;
    for ((g, s), m) in cur.grad.iter_mut().zip(&snap.grad).zip(&state.mu) {
        *g = (*g - s) + m;
    }
    fc.add(2 * cur.grad.len() as u64);
    state.age += 1;
    cur.peak_act_units = cur.peak_act_units.max(snap.peak_act_units);
    cur.flops = fc.since(start);
    Ok(cur)
}

/// Indices of the `⌈fraction·d⌉` largest `|w_i|`, largest first, ties to the
/// lower index.
pub fn sparse_mask(w: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sparse fraction {fraction} outside (0, 1]")));
    }
    let k = sparse_count(w.len(), fraction);
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `⌈fraction·d⌉`, guarded against products like `0.07·100` landing a hair
/// above an integer.
pub fn sparse_count(d: usize, fraction: f64) -> usize {
    let raw = fraction * d as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    k.clamp(1, d.max(1))
}

/// Zeroes every coordinate outside `mask`.
pub fn apply_mask(v: &mut [f64], mask: &[usize]) {
    let mut keep = vec![false; v.len()];
    for &i in mask {
        keep[i] = true;
    }
    for (x, k) in v.iter_mut().zip(keep) {
        if !k {
            *x = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Linear, Quadratic};

    #[test]
    fn accumulate_examples() {
        let mut a = Accumulator::new(2).unwrap();
        assert_eq!(a.push(&[2.0]), None);
        assert_eq!(a.push(&[4.0]), Some(vec![3.0]));
        let mut one = Accumulator::new(1).unwrap();
        assert_eq!(one.push(&[1.5, -2.0]), Some(vec![1.5, -2.0]));
        let mut big = Accumulator::new(100).unwrap();
        let emitted = (0..1050).filter(|_| big.push(&[1.0]).is_some()).count();
        assert_eq!(emitted, 10);
        assert_eq!(big.emitted(), 10);
    }

    #[test]
    fn sparse_examples() {
        assert_eq!(sparse_mask(&[-3.0, 0.5, 2.0, 1.0], 0.25).unwrap(), vec![0]);
        assert_eq!(sparse_mask(&[1.0, 2.0, 3.0], 1.0).unwrap().len(), 3);
        assert_eq!(sparse_mask(&[1.0, 1.0, 2.0, 3.0], 0.5).unwrap(), vec![3, 2]);
        assert_eq!(sparse_mask(&[1.0, 1.0], 0.5).unwrap(), vec![0]);
        assert_eq!(sparse_count(100, 0.07), 7);
        assert_eq!(sparse_count(64, 0.01), 1);
        assert!(sparse_mask(&[1.0], 0.0).is_err());
    }

    #[test]
    fn calibration_picks_positive_projection() {
        let obj = Linear::new(vec![0.3, -1.0, 2.0]).unwrap();
        let v = vec![1.0, 0.5, -0.2];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        for base in [Base::Fmad, Base::Zo] {
            let cfg = EstimatorConfig::new(base);
            let (state, est) =
                calibrate(&obj, &[0.0; 3], &cfg, &[v.clone(), neg.clone()], &mut FlopCounter::new())
                    .unwrap();
            // g·v = 0.3 − 0.5 − 0.4 < 0, so −v wins
            assert!(est.jvps[0] > 0.0);
            assert!(state.direction()[0] < 0.0);
            assert!(!state.nonpositive_calibration);
        }
    }

    #[test]
    fn adaptive_degenerate_betas() {
        let obj = Linear::new(vec![1.0, 2.0]).unwrap();
        let mut cfg = EstimatorConfig::new(Base::Fmad);
        let cand = vec![vec![3.0, 4.0]];
        cfg.rolling_beta = 1.0;
        let (mut frozen, est) = calibrate(&obj, &[0.0; 2], &cfg, &cand, &mut FlopCounter::new()).unwrap();
        let dir = adaptive_next(&mut frozen, &est.grad, &[-7.0, 1.0]);
        let r2 = 2f64.sqrt();
        assert!((dir[0] - 0.6 * r2).abs() < 1e-14 && (dir[1] - 0.8 * r2).abs() < 1e-14);

        cfg.rolling_beta = 0.0;
        let (mut fresh, est) = calibrate(&obj, &[0.0; 2], &cfg, &cand, &mut FlopCounter::new()).unwrap();
        let dir = adaptive_next(&mut fresh, &est.grad, &[0.0, -5.0]);
        assert!((dir[0]).abs() < 1e-15 && (dir[1] + r2).abs() < 1e-14);
    }

    #[test]
    fn svrg_at_snapshot_returns_mu() {
        let q = Quadratic::ill_conditioned(1.0, 10.0, 6).unwrap();
        let w = vec![0.5, -1.0, 2.0, 0.1, 0.0, -0.3];
        for base in [Base::Fmad, Base::Zo] {
            let cfg = EstimatorConfig::new(base);
            let perts = cfg.perturbations(9, 0, 6);
            let mut fc = FlopCounter::new();
            let mut st = SvrgState::refresh(&q, &w, &cfg, &perts, 5, &mut fc).unwrap();
            let g = svrg_estimate(&q, &w, &mut st, &cfg, &Perturbation::new(77, 6), &mut fc).unwrap();
            assert_eq!(g.grad, st.mu());
        }
    }

    #[test]
    fn stale_snapshot_is_reported() {
        let q = Quadratic::isotropic(1.0, 2).unwrap();
        let cfg = EstimatorConfig::new(Base::Fmad);
        let mut fc = FlopCounter::new();
        let mut st = SvrgState::refresh(&q, &[1.0, 1.0], &cfg, &cfg.perturbations(1, 0, 2), 1, &mut fc)
            .unwrap();
        let p = Perturbation::new(3, 2);
        svrg_estimate(&q, &[1.0, 1.0], &mut st, &cfg, &p, &mut fc).unwrap();
        svrg_estimate(&q, &[1.0, 1.0], &mut st, &cfg, &p, &mut fc).unwrap();
        assert!(st.needs_refresh());
        assert_eq!(
            svrg_estimate(&q, &[1.0, 1.0], &mut st, &cfg, &p, &mut fc),
            Err(Error::StaleSnapshot { age: 2, interval: 1 })
        );
    }

    #[test]
    fn single_perturbation_equals_base() {
        let q = Quadratic::isotropic(2.0, 4).unwrap();
        let w = [1.0, -2.0, 0.5, 3.0];
        for base in [Base::Fmad, Base::Zo] {
            let cfg = EstimatorConfig::new(base);
            let p = Perturbation::new(5, 4);
            let single = estimate_once(&q, &w, &cfg, Direction::Seeded(&p), None, &mut FlopCounter::new())
                .unwrap();
            let multi = estimate_multiple(&q, &w, &cfg, &[p], None, &mut FlopCounter::new()).unwrap();
            assert_eq!(single.grad, multi.grad);
            assert_eq!(single.jvps, multi.jvps);
            assert_eq!(single.flops, multi.flops);
            assert_eq!(single.peak_act_units, multi.peak_act_units);
        }
    }

    #[test]
    fn masked_estimate_is_zero_off_mask() {
        let q = Quadratic::isotropic(1.0, 5).unwrap();
        let w = [0.1, 5.0, -0.2, 3.0, 0.0];
        let mask = sparse_mask(&w, 0.4).unwrap();
        assert_eq!(mask, vec![1, 3]);
        let cfg = EstimatorConfig::new(Base::Zo);
        let g = estimate_once(
            &q,
            &w,
            &cfg,
            Direction::Seeded(&Perturbation::new(1, 5)),
            Some(&mask),
            &mut FlopCounter::new(),
        )
        .unwrap();
        for i in [0, 2, 4] {
            assert_eq!(g.grad[i], 0.0);
        }
        assert!(g.grad[1] != 0.0);
    }
}
