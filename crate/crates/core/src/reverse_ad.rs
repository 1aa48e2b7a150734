//! Backpropagation over chain models.
//!
//! The vanilla engine keeps every layer output alive until the backward
//! sweep consumes it, so its activation peak is `Σ|y_i|`. The checkpointed
//! engine keeps only the outputs at segment ends during the forward pass and
//! recomputes each segment just before differentiating through it, which
//! bounds the peak by `(⌈D/s⌉ + s)·c` for width-`c` chains.
//!
//! Both engines run the same kernels in the same order, so their gradients
//! are bit-identical.

use crate::error::{Error, Result};
use crate::estimate::{GradEstimate, Method};
use crate::memory::MemoryMeter;
use crate::nn::{self, Batch, LossSpec, Model};
use crate::tensor::{FlopCounter, Tensor};

/// How an exact gradient is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    #[default]
    Vanilla,
    /// Segment checkpointing; `None` picks `⌈√D⌉`.
    Checkpointed { segment: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPlan {
    depth: usize,
    segment: usize,
    boundaries: Vec<usize>,
}

impl CheckpointPlan {
    /// Stores the outputs of layers `s, 2s, …` (1-based) and always the last.
    pub fn new(depth: usize, segment: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Plan("depth must be positive".into()));
        }
        if segment == 0 || segment > depth {
            return Err(Error::Plan(format!(
                "segment size {segment} outside 1..={depth}"
            )));
        }
        let boundaries = (1..=depth)
            .filter(|&i| i % segment == 0 || i == depth)
            .collect();
        Ok(Self {
            depth,
            segment,
            boundaries,
        })
    }

    pub fn default_for(depth: usize) -> Self {
        let s = (depth as f64).sqrt().ceil() as usize;
        Self::new(depth, s.clamp(1, depth.max(1))).expect("default segment is in range")
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    /// 1-based indices of the layers whose outputs are kept.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    fn is_boundary(&self, layer: usize) -> bool {
        (layer + 1).is_multiple_of(self.segment) || layer + 1 == self.depth
    }
}

/// A recorded forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeRecord {
    pub layer: usize,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    input: Tensor,
    records: Vec<TapeRecord>,
    peak: u64,
}

impl Tape {
    pub fn record(model: &Model, params: &[f64], x: &Tensor, fc: &mut FlopCounter) -> Result<Self> {
        model.check_params(params)?;
        let widths = nn::layer_widths(model, x)?;
        let rows = x.rows();
        let mut meter = MemoryMeter::new();
        let mut records: Vec<TapeRecord> = Vec::with_capacity(model.depth());
        let mut in_w = x.cols();
        for (i, layer) in model.layers().iter().enumerate() {
            let input = records.last().map_or(x.data(), |r| r.output.data());
            let y = layer.forward(model.layer_params(params, i), input, rows, in_w, fc);
            meter.alloc(y.len());
            records.push(TapeRecord {
                layer: i,
                output: Tensor::new(vec![rows, widths[i]], y)?,
            });
            in_w = widths[i];
        }
        Ok(Self {
            input: x.clone(),
            records,
            peak: meter.peak(),
        })
    }

    pub fn records(&self) -> &[TapeRecord] {
        &self.records
    }

    pub fn output(&self) -> &Tensor {
        &self.records.last().expect("tapes are non-empty").output
    }

    pub fn peak_activation_units(&self) -> u64 {
        self.peak
    }

    /// Reruns the recorded pass and returns the final output.
    pub fn replay(&self, model: &Model, params: &[f64], fc: &mut FlopCounter) -> Result<Tensor> {
        let (_, y) = nn::forward(model, params, &self.input, fc)?;
        Ok(y)
    }
}

fn finish(
    grad: Vec<f64>,
    loss: f64,
    method: Method,
    flops: u64,
    peak: u64,
) -> Result<GradEstimate> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::overflow(format!("gradient coordinate {i} is {}", grad[i])));
    }
    Ok(GradEstimate {
        grad,
        method,
        n: 1,
        epsilon: None,
        jvps: Vec::new(),
        loss,
        flops,
        peak_act_units: peak,
    })
}

pub fn backward_vanilla(
    model: &Model,
    params: &[f64],
    batch: &Batch,
    loss: LossSpec,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    let start = fc.total();
    let tape = Tape::record(model, params, &batch.x, fc)?;
    let rows = batch.rows();
    let out = tape.output();
    let (value, mut gy) =
        nn::evaluate_loss(loss, out.data(), rows, out.cols(), &batch.target, true, fc)?;
    let mut grad = vec![0.0; model.dim()];
    for i in (0..model.depth()).rev() {
        let input = if i == 0 {
            batch.x.data()
        } else {
            tape.records[i - 1].output.data()
        };
        let (s, l) = model.offsets()[i];
        gy = model.layers()[i].backward(
            model.layer_params(params, i),
            input,
            tape.records[i].output.data(),
            &gy,
            rows,
            &mut grad[s..s + l],
            fc,
        );
    }
    finish(grad, value, Method::BpVanilla, fc.since(start), tape.peak)
}

pub fn backward_checkpointed(
    model: &Model,
    params: &[f64],
    batch: &Batch,
    loss: LossSpec,
    plan: &CheckpointPlan,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    model.check_params(params)?;
    if plan.depth != model.depth() {
        return Err(Error::Plan(format!(
            "plan covers depth {} but the model has {} layers",
            plan.depth,
            model.depth()
        )));
    }
    let start = fc.total();
    let widths = nn::layer_widths(model, &batch.x)?;
    let rows = batch.rows();
    let x = batch.x.data();
    let in_width = |i: usize| if i == 0 { batch.x.cols() } else { widths[i - 1] };
    let mut meter = MemoryMeter::new();

    // Forward: keep boundary outputs, drop everything else once consumed.
    let mut checkpoints: Vec<Option<Vec<f64>>> = vec![None; model.depth()];
    let mut transient: Option<Vec<f64>> = None;
    for (i, layer) in model.layers().iter().enumerate() {
        let y = {
            let input = match (i, &transient) {
                (0, _) => x,
                (_, Some(t)) => t.as_slice(),
                (_, None) => checkpoints[i - 1].as_deref().expect("previous output is stored"),
            };
            layer.forward(model.layer_params(params, i), input, rows, in_width(i), fc)
        };
        meter.alloc(y.len());
        if let Some(t) = transient.take() {
            meter.free(t.len());
        }
        if plan.is_boundary(i) {
            checkpoints[i] = Some(y);
        } else {
            transient = Some(y);
        }
    }

    let last = model.depth() - 1;
    let out = checkpoints[last].as_deref().expect("last layer is a boundary");
    let (value, mut gy) =
        nn::evaluate_loss(loss, out, rows, widths[last], &batch.target, true, fc)?;

    // Backward: recompute one segment at a time, newest first.
    let mut grad = vec![0.0; model.dim()];
    let s = plan.segment;
    let segments = model.depth().div_ceil(s);
    for k in (0..segments).rev() {
        let (a, b) = (k * s, ((k + 1) * s).min(model.depth()));
        let seg_input: &[f64] = if a == 0 {
            x
        } else {
            checkpoints[a - 1].as_deref().expect("segment start is stored")
        };
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(b - a);
        for i in a..b {
            let input = outputs.last().map_or(seg_input, Vec::as_slice);
            let y = model.layers()[i].forward(
                model.layer_params(params, i),
                input,
                rows,
                in_width(i),
                fc,
            );
            meter.alloc(y.len());
            outputs.push(y);
        }
        for i in (a..b).rev() {
            let input = if i == a { seg_input } else { outputs[i - a - 1].as_slice() };
            let (o, l) = model.offsets()[i];
            gy = model.layers()[i].backward(
                model.layer_params(params, i),
                input,
                &outputs[i - a],
                &gy,
                rows,
                &mut grad[o..o + l],
                fc,
            );
            meter.free(outputs[i - a].len());
        }
    }
    finish(grad, value, Method::BpCheckpointed, fc.since(start), meter.peak())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, InitScheme, Target};

    fn batch(rows: usize, cols: usize, out: usize, seed: u64) -> Batch {
        let gen = |n: usize, salt: u64| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let h = crate::seed::splitmix64(seed ^ salt ^ (i as u64) << 8);
                    (h % 2001) as f64 / 1000.0 - 1.0
                })
                .collect()
        };
        Batch::new(
            Tensor::new(vec![rows, cols], gen(rows * cols, 1)).unwrap(),
            Target::Dense(Tensor::new(vec![rows, out], gen(rows * out, 2)).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn square_via_one_parameter_chain() {
        // f(w) = (w·1 - 0)² at w = 3
        let m = Model::parse("linear:1:1:nobias").unwrap();
        let b = Batch::new(
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Target::Dense(Tensor::new(vec![1, 1], vec![0.0]).unwrap()),
        )
        .unwrap();
        let g = backward_vanilla(&m, &[3.0], &b, LossSpec::Mse, &mut FlopCounter::new()).unwrap();
        assert_eq!(g.grad, vec![6.0]);
        assert_eq!(g.loss, 9.0);
    }

    #[test]
    fn zero_everything_gives_zero_gradient() {
        let m = Model::parse("linear:3:4,tanh,linear:4:2").unwrap();
        let b = Batch::new(
            Tensor::zeros(vec![2, 3]).unwrap(),
            Target::Dense(Tensor::zeros(vec![2, 2]).unwrap()),
        )
        .unwrap();
        let g = backward_vanilla(&m, &vec![0.0; m.dim()], &b, LossSpec::Mse, &mut FlopCounter::new())
            .unwrap();
        assert!(g.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn plan_boundaries() {
        let p = CheckpointPlan::new(10, 4).unwrap();
        assert_eq!(p.boundaries(), &[4, 8, 10]);
        assert_eq!(CheckpointPlan::default_for(16).segment(), 4);
        assert_eq!(CheckpointPlan::default_for(17).segment(), 5);
        assert!(CheckpointPlan::new(4, 0).is_err());
        assert!(CheckpointPlan::new(4, 5).is_err());
    }

    #[test]
    fn tape_replay_is_bit_exact() {
        let m = Model::parse("linear:3:5,softplus,linear:5:2,tanh").unwrap();
        let p = init_params(&m, 5, InitScheme::ScaledUniform);
        let b = batch(4, 3, 2, 9);
        let tape = Tape::record(&m, &p, &b.x, &mut FlopCounter::new()).unwrap();
        let y = tape.replay(&m, &p, &mut FlopCounter::new()).unwrap();
        assert_eq!(&y, tape.output());
        assert!(tape.peak_activation_units() >= 4 * 5);
    }

    #[test]
    fn sixteen_layer_chain_memory() {
        let mut spec = Vec::new();
        for i in 0..16 {
            spec.push(if i % 2 == 0 { "linear:8:8" } else { "tanh" });
        }
        let m = Model::parse(&spec.join(",")).unwrap();
        let p = init_params(&m, 1, InitScheme::ScaledUniform);
        let b = batch(1, 8, 8, 2);
        let v = backward_vanilla(&m, &p, &b, LossSpec::Mse, &mut FlopCounter::new()).unwrap();
        let plan = CheckpointPlan::new(16, 4).unwrap();
        let c = backward_checkpointed(&m, &p, &b, LossSpec::Mse, &plan, &mut FlopCounter::new())
            .unwrap();
        assert_eq!(v.peak_act_units, 128);
        assert_eq!(c.peak_act_units, 64);
        assert_eq!(v.grad, c.grad);
    }

    #[test]
    fn single_segment_costs_one_extra_forward() {
        let m = Model::parse("linear:4:6,relu,linear:6:3").unwrap();
        let p = init_params(&m, 4, InitScheme::ScaledUniform);
        let b = batch(5, 4, 3, 3);
        let mut fwd = FlopCounter::new();
        nn::forward(&m, &p, &b.x, &mut fwd).unwrap();
        let v = backward_vanilla(&m, &p, &b, LossSpec::Mse, &mut FlopCounter::new()).unwrap();
        let plan = CheckpointPlan::new(3, 3).unwrap();
        let c = backward_checkpointed(&m, &p, &b, LossSpec::Mse, &plan, &mut FlopCounter::new())
            .unwrap();
        assert_eq!(c.flops, v.flops + fwd.total());
        assert_eq!(c.grad, v.grad);
        // the recomputed segment plus the stored final output
        assert_eq!(c.peak_act_units, v.peak_act_units + 5 * 3);
    }

    #[test]
    fn non_finite_loss_is_overflow() {
        let m = Model::parse("linear:1:1:nobias").unwrap();
        let b = Batch::new(
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Target::Dense(Tensor::new(vec![1, 1], vec![0.0]).unwrap()),
        )
        .unwrap();
        let err = backward_vanilla(&m, &[1e300], &b, LossSpec::Mse, &mut FlopCounter::new());
        assert!(matches!(err, Err(Error::Overflow { .. })));
    }
}
