//! Update rules and step-size admissibility thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Nesterov,
    AdamW,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Nesterov => "nesterov",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "nesterov" => Ok(OptimizerKind::Nesterov),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected sgd, nesterov or adamw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub eta: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, eta: f64) -> Self {
        Self {
            kind,
            eta,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }

    pub fn sgd(eta: f64) -> Self {
        Self::new(OptimizerKind::Sgd, eta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config("weight decay must be ≥ 0 and eps > 0".into()));
        }
        Ok(())
    }
}

/// What a step did to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// `‖Δw‖₂`.
    pub update_norm: f64,
    /// Effective gradient `-Δw/η`, per coordinate.
    pub effective_grad: Vec<f64>,
}

impl StepInfo {
    pub fn effective_grad_norm(&self) -> f64 {
        self.effective_grad.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let second = if cfg.kind == OptimizerKind::AdamW { dim } else { 0 };
        Ok(Self {
            cfg,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; second],
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. With a mask only the listed coordinates change;
    /// the optimizer state of the others is left as it was.
    pub fn step(&mut self, w: &mut [f64], g: &[f64], mask: Option<&[usize]>) -> Result<StepInfo> {
        if g.len() != w.len() || w.len() != self.m.len() {
            return Err(Error::Length {
                expected: self.m.len(),
                got: g.len(),
            });
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::overflow(format!(
                "gradient coordinate {i} is {} at step {}",
                g[i], self.t
            )));
        }
        self.t += 1;
        let before = w.to_vec();
        match mask {
            Some(idx) => {
                for &i in idx {
                    self.update(w, g, i);
                }
            }
            None => {
                for i in 0..w.len() {
                    self.update(w, g, i);
                }
            }
        }
        let eta = self.cfg.eta;
        let effective_grad: Vec<f64> = before.iter().zip(w.iter()).map(|(b, a)| (b - a) / eta).collect();
        let update_norm = before
            .iter()
            .zip(w.iter())
            .map(|(b, a)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if let Some(i) = w.iter().position(|x| !x.is_finite()) {
            return Err(Error::overflow(format!("parameter {i} left the finite range")));
        }
        Ok(StepInfo {
            update_norm,
            effective_grad,
        })
    }

    #[inline]
    fn update(&mut self, w: &mut [f64], g: &[f64], i: usize) {
        let c = &self.cfg;
        match c.kind {
            OptimizerKind::Sgd => w[i] -= c.eta * g[i],
            OptimizerKind::Nesterov => {
                self.m[i] = c.momentum * self.m[i] + g[i];
                w[i] -= c.eta * (g[i] + c.momentum * self.m[i]);
            }
            OptimizerKind::AdamW => {
                w[i] -= c.eta * c.weight_decay * w[i];
                self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
                self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let t = self.t as i32;
                let mh = self.m[i] / (1.0 - c.beta1.powi(t));
                let vh = self.v[i] / (1.0 - c.beta2.powi(t));
                w[i] -= c.eta * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Largest admissible step for forward-mode and zero-order gradient descent:
/// `2 / (L·(1 + (d+1)/n))`.
pub fn max_stable_eta(l: f64, d: usize, n: usize) -> f64 {
    2.0 / (l * (1.0 + (d as f64 + 1.0) / n as f64))
}

/// Largest step covered by the exact-gradient bound: `1/L`.
pub fn bp_max_eta(l: f64) -> f64 {
    1.0 / l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_example() {
        let mut o = Optimizer::new(OptimizerConfig::sgd(0.1), 1).unwrap();
        let mut w = [1.0];
        o.step(&mut w, &[2.0], None).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step() {
        let mut o = Optimizer::new(OptimizerConfig::new(OptimizerKind::AdamW, 0.1), 1).unwrap();
        let mut w = [0.0];
        o.step(&mut w, &[1.0], None).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-16);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Nesterov, OptimizerKind::AdamW] {
            let mut o = Optimizer::new(OptimizerConfig::new(kind, 0.5), 2).unwrap();
            let mut w = [1.5, -2.0];
            let info = o.step(&mut w, &[0.0, 0.0], None).unwrap();
            assert_eq!(w, [1.5, -2.0]);
            assert_eq!(info.update_norm, 0.0);
        }
    }

    #[test]
    fn nesterov_matches_hand_recurrence() {
        let mut o = Optimizer::new(OptimizerConfig::new(OptimizerKind::Nesterov, 0.1), 1).unwrap();
        let mut w = [1.0];
        o.step(&mut w, &[1.0], None).unwrap();
        // buf = 1, step = 1 + 0.9
        assert!((w[0] - (1.0 - 0.19)).abs() < 1e-15);
        o.step(&mut w, &[1.0], None).unwrap();
        // buf = 1.9, step = 1 + 1.71
        assert!((w[0] - (0.81 - 0.271)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_overflow() {
        let mut o = Optimizer::new(OptimizerConfig::sgd(0.1), 2).unwrap();
        let mut w = [1.0, 1.0];
        assert!(matches!(
            o.step(&mut w, &[f64::NAN, 0.0], None),
            Err(Error::Overflow { .. })
        ));
        assert_eq!(w, [1.0, 1.0]);
    }

    #[test]
    fn masked_step_leaves_other_coordinates() {
        let mut cfg = OptimizerConfig::new(OptimizerKind::AdamW, 0.1);
        cfg.weight_decay = 0.1;
        let mut o = Optimizer::new(cfg, 3).unwrap();
        let mut w = [1.0, 2.0, 3.0];
        o.step(&mut w, &[1.0, 1.0, 1.0], Some(&[1])).unwrap();
        assert_eq!(w[0].to_bits(), 1f64.to_bits());
        assert_eq!(w[2].to_bits(), 3f64.to_bits());
        assert!(w[1] < 2.0);
    }

    #[test]
    fn effective_gradient_of_sgd_is_the_gradient() {
        let mut o = Optimizer::new(OptimizerConfig::sgd(0.25), 2).unwrap();
        let mut w = [1.0, 1.0];
        let info = o.step(&mut w, &[2.0, -4.0], None).unwrap();
        assert_eq!(info.effective_grad, vec![2.0, -4.0]);
    }

    #[test]
    fn threshold_examples() {
        assert!((max_stable_eta(1.0, 11, 1) - 2.0 / 13.0).abs() < 1e-15);
        assert!((max_stable_eta(1.0, 1000, 10) - 2.0 / 101.1).abs() < 1e-15);
        assert!((max_stable_eta(1.0, 10, usize::MAX) - 2.0).abs() < 1e-12);
        assert_eq!(bp_max_eta(2.0), 0.5);
        assert_eq!(bp_max_eta(1.0), 1.0);
        let ratio = |d| bp_max_eta(1.0) / max_stable_eta(1.0, d, 1);
        // (1 + (d+1))/2 is affine in d
        assert!((ratio(100) - ratio(10) - 45.0).abs() < 1e-9);
        assert!((ratio(1000) - ratio(100) - 450.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_eta_rejected() {
        assert!(Optimizer::new(OptimizerConfig::sgd(0.0), 1).is_err());
        assert!(Optimizer::new(OptimizerConfig::sgd(-1.0), 1).is_err());
    }
}
