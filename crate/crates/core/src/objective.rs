//! Differentiable objectives `f: ℝ^d → ℝ` the engines operate on.

use crate::error::{Error, Result};
use crate::estimate::{GradEstimate, Method};
use crate::forward_ad::{self, JvpResult};
use crate::nn::{self, Batch, LossSpec, Model};
use crate::reverse_ad::{self, BackwardMode, CheckpointPlan};
use crate::tensor::{kernels, FlopCounter};

/// Loss value and the activation memory its evaluation needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    pub loss: f64,
    pub peak_act_units: u64,
}

/// Evaluation is a pure function of the parameters, so one objective can be
/// shared across threads as long as each thread brings its own counter.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, w: &[f64], fc: &mut FlopCounter) -> Result<Eval>;

    /// Exact gradient.
    fn gradient(&self, w: &[f64], mode: BackwardMode, fc: &mut FlopCounter)
        -> Result<GradEstimate>;

    /// Directional derivative `v·∇f(w)`.
    fn jvp(&self, w: &[f64], v: &[f64], fc: &mut FlopCounter) -> Result<JvpResult>;
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Length { expected, got });
    }
    Ok(())
}

fn exact(grad: Vec<f64>, loss: f64, flops: u64) -> GradEstimate {
    GradEstimate {
        grad,
        method: Method::BpVanilla,
        n: 1,
        epsilon: None,
        jvps: Vec::new(),
        loss,
        flops,
        peak_act_units: 0,
    }
}

/// `f(w) = ½ Σ c_i w_i²`. The smoothness constant is `max c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    curvature: Vec<f64>,
}

impl Quadratic {
    /// Isotropic `L/2·‖w‖²`.
    pub fn isotropic(l: f64, d: usize) -> Result<Self> {
        Self::diagonal(vec![l; d])
    }

    /// Curvatures spaced geometrically from `l/kappa` up to `l`.
    pub fn ill_conditioned(l: f64, kappa: f64, d: usize) -> Result<Self> {
        if kappa < 1.0 {
            return Err(Error::Config("condition number must be at least 1".into()));
        }
        let c = (0..d)
            .map(|i| {
                let t = if d == 1 { 1.0 } else { i as f64 / (d - 1) as f64 };
                l * kappa.powf(t - 1.0)
            })
            .collect();
        Self::diagonal(c)
    }

    pub fn diagonal(curvature: Vec<f64>) -> Result<Self> {
        if curvature.is_empty() || curvature.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("curvatures must be positive and finite".into()));
        }
        Ok(Self { curvature })
    }

    pub fn smoothness(&self) -> f64 {
        self.curvature.iter().copied().fold(0.0, f64::max)
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    fn value(&self, w: &[f64], fc: &mut FlopCounter) -> f64 {
        let mut acc = 0.0;
        for (&c, &x) in self.curvature.iter().zip(w) {
            acc += c * x * x;
        }
        fc.add(3 * w.len() as u64 + 1);
        0.5 * acc
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn evaluate(&self, w: &[f64], fc: &mut FlopCounter) -> Result<Eval> {
        check_len(self.dim(), w.len())?;
        Ok(Eval {
            loss: finite(self.value(w, fc), "loss")?,
            peak_act_units: 0,
        })
    }

    fn gradient(&self, w: &[f64], _: BackwardMode, fc: &mut FlopCounter) -> Result<GradEstimate> {
        check_len(self.dim(), w.len())?;
        let start = fc.total();
        let loss = finite(self.value(w, fc), "loss")?;
        let grad: Vec<f64> = self.curvature.iter().zip(w).map(|(&c, &x)| c * x).collect();
        fc.add(w.len() as u64);
        Ok(exact(grad, loss, fc.since(start)))
    }

    fn jvp(&self, w: &[f64], v: &[f64], fc: &mut FlopCounter) -> Result<JvpResult> {
        check_len(self.dim(), w.len())?;
        check_len(self.dim(), v.len())?;
        let start = fc.total();
        let loss = finite(self.value(w, fc), "loss")?;
        let mut jvp = 0.0;
        for ((&c, &x), &d) in self.curvature.iter().zip(w).zip(v) {
            jvp += c * x * d;
        }
        fc.add(3 * w.len() as u64);
        Ok(JvpResult {
            jvp: finite(jvp, "tangent")?,
            loss,
            peak_act_units: 0,
            flops: fc.since(start),
        })
    }
}

/// `f(w) = g·w`, whose gradient is `g` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    g: Vec<f64>,
}

impl Linear {
    pub fn new(g: Vec<f64>) -> Result<Self> {
        if g.is_empty() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("linear objective needs a finite, non-empty gradient".into()));
        }
        Ok(Self { g })
    }

    pub fn grad(&self) -> &[f64] {
        &self.g
    }
}

impl Objective for Linear {
    fn dim(&self) -> usize {
        self.g.len()
    }

    fn evaluate(&self, w: &[f64], fc: &mut FlopCounter) -> Result<Eval> {
        check_len(self.dim(), w.len())?;
        Ok(Eval {
            loss: finite(kernels::dot(&self.g, w, fc), "loss")?,
            peak_act_units: 0,
        })
    }

    fn gradient(&self, w: &[f64], _: BackwardMode, fc: &mut FlopCounter) -> Result<GradEstimate> {
        check_len(self.dim(), w.len())?;
        let start = fc.total();
        let loss = finite(kernels::dot(&self.g, w, fc), "loss")?;
        Ok(exact(self.g.clone(), loss, fc.since(start)))
    }

    fn jvp(&self, w: &[f64], v: &[f64], fc: &mut FlopCounter) -> Result<JvpResult> {
        check_len(self.dim(), w.len())?;
        check_len(self.dim(), v.len())?;
        let start = fc.total();
        let loss = finite(kernels::dot(&self.g, w, fc), "loss")?;
        let jvp = finite(kernels::dot(&self.g, v, fc), "tangent")?;
        Ok(JvpResult {
            jvp,
            loss,
            peak_act_units: 0,
            flops: fc.since(start),
        })
    }
}

/// Loss of a chain model on a fixed batch as a function of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelObjective {
    pub model: Model,
    pub batch: Batch,
    pub loss: LossSpec,
}

impl ModelObjective {
    pub fn new(model: Model, batch: Batch, loss: LossSpec) -> Result<Self> {
        nn::layer_widths(&model, &batch.x)?;
        Ok(Self { model, batch, loss })
    }
}

impl Objective for ModelObjective {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn evaluate(&self, w: &[f64], fc: &mut FlopCounter) -> Result<Eval> {
        let widths = nn::layer_widths(&self.model, &self.batch.x)?;
        self.model.check_params(w)?;
        let rows = self.batch.rows();
        // Streaming pass: only the current input and output are alive.
        let mut peak = 0u64;
        let mut cur: Option<Vec<f64>> = None;
        let mut in_w = self.batch.x.cols();
        for (i, layer) in self.model.layers().iter().enumerate() {
            let input = cur.as_deref().unwrap_or(self.batch.x.data());
            let y = layer.forward(self.model.layer_params(w, i), input, rows, in_w, fc);
            let live = y.len() + cur.as_ref().map_or(0, Vec::len);
            peak = peak.max(live as u64);
            in_w = widths[i];
            cur = Some(y);
        }
        let y = cur.expect("models are non-empty");
        let (loss, _) =
            nn::evaluate_loss(self.loss, &y, rows, in_w, &self.batch.target, false, fc)?;
        Ok(Eval {
            loss,
            peak_act_units: peak,
        })
    }

    fn gradient(&self, w: &[f64], mode: BackwardMode, fc: &mut FlopCounter) -> Result<GradEstimate> {
        match mode {
            BackwardMode::Vanilla => {
                reverse_ad::backward_vanilla(&self.model, w, &self.batch, self.loss, fc)
            }
            BackwardMode::Checkpointed { segment } => {
                let depth = self.model.depth();
                let plan = match segment {
                    Some(s) => CheckpointPlan::new(depth, s)?,
                    None => CheckpointPlan::default_for(depth),
                };
                reverse_ad::backward_checkpointed(&self.model, w, &self.batch, self.loss, &plan, fc)
            }
        }
    }

    fn jvp(&self, w: &[f64], v: &[f64], fc: &mut FlopCounter) -> Result<JvpResult> {
        forward_ad::jvp(&self.model, w, &self.batch, self.loss, v, fc)
    }
}

pub(crate) fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::overflow(format!("{what} evaluated to {x}")))
    }
}
