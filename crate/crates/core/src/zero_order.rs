//! Central finite differences along seeded Gaussian directions.
//!
//! The direction `v` is never stored alongside the model state: it is
//! regenerated from its seed whenever it is needed. Each side of the
//! difference is evaluated at a probe point written into one scratch buffer,
//! so the caller's parameters are never touched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{GradEstimate, Method};
use crate::objective::Objective;
use crate::tensor::FlopCounter;

/// Default finite-difference step.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// A direction `v ~ N(0, σ²·I_d)` identified by its seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub seed: u64,
    pub sigma2: f64,
    pub dim: usize,
}

impl Perturbation {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            sigma2: 1.0,
            dim,
        }
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }

    /// Regenerates `v`.
    ///
    /// Generator: ChaCha8 seeded with `seed` through `seed_from_u64`, uniform
    /// doubles mapped to `(-1, 1)`, Marsaglia's polar method with `libm::log`
    /// (pairs emitted in order), then scaled by `√σ²`.
    pub fn regenerate(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.fill(&mut v);
        v
    }

    pub fn fill(&self, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let sigma = self.sigma2.sqrt();
        let mut i = 0;
        while i < out.len() {
            let (a, b) = loop {
                let u = 2.0 * rng.gen::<f64>() - 1.0;
                let w = 2.0 * rng.gen::<f64>() - 1.0;
                let s = u * u + w * w;
                if s > 0.0 && s < 1.0 {
                    let m = (-2.0 * libm::log(s) / s).sqrt();
                    break (u * m, w * m);
                }
            };
            out[i] = sigma * a;
            if i + 1 < out.len() {
                out[i + 1] = sigma * b;
            }
            i += 2;
        }
    }
}

pub fn regenerate(p: &Perturbation) -> Vec<f64> {
    p.regenerate()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    pub epsilon: f64,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ZoConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }
}

/// `s = (f(w+εv) − f(w−εv)) / (2ε)` and `ĝ = s·v` for a seeded direction.
pub fn zo_estimate(
    obj: &dyn Objective,
    w: &[f64],
    p: &Perturbation,
    cfg: ZoConfig,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    if p.dim != w.len() {
        return Err(Error::Length {
            expected: w.len(),
            got: p.dim,
        });
    }
    let mut buf = vec![0.0; w.len()];
    p.fill(&mut buf);
    zo_estimate_with(obj, w, &mut buf, |b| p.fill(b), cfg, fc)
}

/// Same estimator for an explicit direction `v`.
pub fn zo_estimate_dir(
    obj: &dyn Objective,
    w: &[f64],
    v: &[f64],
    cfg: ZoConfig,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    if v.len() != w.len() {
        return Err(Error::Length {
            expected: w.len(),
            got: v.len(),
        });
    }
    let mut buf = v.to_vec();
    zo_estimate_with(obj, w, &mut buf, |b| b.copy_from_slice(v), cfg, fc)
}

/// Core of both entry points. `dir` holds `v` on entry; `reload` writes `v`
/// into a buffer again after the buffer has been reused as the probe.
pub(crate) fn zo_estimate_with(
    obj: &dyn Objective,
    w: &[f64],
    dir: &mut [f64],
    reload: impl Fn(&mut [f64]),
    cfg: ZoConfig,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    if cfg.epsilon.is_nan() || cfg.epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let start = fc.total();
    let eps = cfg.epsilon;
    let d = w.len() as u64;

    // Probe w + εv, reusing the direction buffer.
    for (b, &x) in dir.iter_mut().zip(w) {
        *b = x + eps * *b;
    }
    fc.add(2 * d);
    let plus = obj
        .evaluate(dir, fc)
        .map_err(|e| e.with_context("zo probe w+εv"))?;

    // Probe w − εv.
    reload(dir);
    for (b, &x) in dir.iter_mut().zip(w) {
        *b = x - eps * *b;
    }
    fc.add(2 * d);
    let minus = obj
        .evaluate(dir, fc)
        .map_err(|e| e.with_context("zo probe w-εv"))?;

    let s = (plus.loss - minus.loss) / (2.0 * eps);
    fc.add(2);
    if !s.is_finite() {
        return Err(Error::overflow(format!("projected scalar is {s}")));
    }
    reload(dir);
    let grad: Vec<f64> = dir.iter().map(|&v| s * v).collect();
    fc.add(d);
    Ok(GradEstimate {
        grad,
        method: Method::Zo,
        n: 1,
        epsilon: Some(eps),
        jvps: vec![s],
        loss: f64::NAN,
        flops: fc.since(start),
        peak_act_units: plus.peak_act_units.max(minus.peak_act_units),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Eval, Quadratic};
    use crate::forward_ad::JvpResult;
    use crate::reverse_ad::BackwardMode;

    struct Cubic;

    impl Objective for Cubic {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, w: &[f64], _: &mut FlopCounter) -> Result<Eval> {
            Ok(Eval {
                loss: w[0] * w[0] * w[0],
                peak_act_units: 0,
            })
        }
        fn gradient(&self, _: &[f64], _: BackwardMode, _: &mut FlopCounter) -> Result<GradEstimate> {
            unimplemented!()
        }
        fn jvp(&self, _: &[f64], _: &[f64], _: &mut FlopCounter) -> Result<JvpResult> {
            unimplemented!()
        }
    }

    #[test]
    fn regeneration_is_seeded() {
        let a = Perturbation::new(0, 33).regenerate();
        assert_eq!(a, Perturbation::new(0, 33).regenerate());
        assert_ne!(a, Perturbation::new(1, 33).regenerate());
        assert!(a.iter().all(|x| x.is_finite()));
        let b = Perturbation::new(0, 33).with_sigma2(4.0).regenerate();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn quadratic_is_exact_for_any_epsilon() {
        let q = Quadratic::isotropic(1.0, 1).unwrap();
        for eps in [1e-1, 1e-3, 0.5] {
            let g = zo_estimate_dir(&q, &[3.0], &[1.0], ZoConfig::new(eps).unwrap(), &mut FlopCounter::new())
                .unwrap();
            assert!((g.jvps[0] - 3.0).abs() < 1e-12);
            assert!((g.grad[0] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_taylor_remainder() {
        let g = zo_estimate_dir(&Cubic, &[1.0], &[1.0], ZoConfig::new(0.1).unwrap(), &mut FlopCounter::new())
            .unwrap();
        assert!((g.jvps[0] - 3.01).abs() < 1e-12);
    }

    #[test]
    fn parameters_untouched_and_cost_counted() {
        let q = Quadratic::isotropic(2.0, 5).unwrap();
        let w: Vec<f64> = vec![0.1, -0.2, 0.3, 1e-17, 7.0];
        let before: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        let mut fc = FlopCounter::new();
        let g = zo_estimate(&q, &w, &Perturbation::new(3, 5), ZoConfig::default(), &mut fc).unwrap();
        let after: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
        let mut one = FlopCounter::new();
        q.evaluate(&w, &mut one).unwrap();
        assert_eq!(g.flops, 2 * one.total() + 5 * 5 + 2);
        assert_eq!(fc.total(), g.flops);
    }

    #[test]
    fn bad_epsilon_rejected() {
        assert!(ZoConfig::new(0.0).is_err());
        assert!(ZoConfig::new(f64::NAN).is_err());
    }
}
