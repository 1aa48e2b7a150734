use serde::{Deserialize, Serialize};

/// Engine that produced a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    BpVanilla,
    BpCheckpointed,
    Fmad,
    Zo,
}

impl Method {
    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::Fmad | Method::Zo)
    }
}

/// A gradient (exact or estimated) together with what it cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEstimate {
    pub grad: Vec<f64>,
    pub method: Method,
    /// Perturbations averaged into `grad`; 1 for backpropagation.
    pub n: usize,
    pub epsilon: Option<f64>,
    /// Per-perturbation directional derivatives: jvp values for forward
    /// mode, projected finite-difference scalars for zero order.
    pub jvps: Vec<f64>,
    /// Loss at the evaluation point when the engine computes it, NaN otherwise.
    pub loss: f64,
    pub flops: u64,
    pub peak_act_units: u64,
}

impl GradEstimate {
    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    /// Mean and max of `|jvp|`, NaN when there are none.
    pub fn jvp_stats(&self) -> (f64, f64) {
        if self.jvps.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for j in &self.jvps {
            sum += j.abs();
            max = max.max(j.abs());
        }
        (sum / self.jvps.len() as f64, max)
    }
}
