//! Forward-mode differentiation by tangent propagation.
//!
//! Each layer maps a (primal, tangent) pair to the next one:
//! `δy_i = (∂y_i/∂w_i)·v_i + (∂y_i/∂y_{i-1})·δy_{i-1}`. Only the pair for the
//! current layer and its input are alive at any time.

use crate::error::{Error, Result};
use crate::estimate::{GradEstimate, Method};
use crate::memory::MemoryMeter;
use crate::nn::{self, Batch, LossSpec, Model};
use crate::objective::{finite, Objective};
use crate::tensor::{kernels, FlopCounter, Tensor};
use crate::zero_order::Perturbation;

#[derive(Debug, Clone, PartialEq)]
pub struct DualActivation {
    pub primal: Tensor,
    pub tangent: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JvpResult {
    pub jvp: f64,
    pub loss: f64,
    pub peak_act_units: u64,
    pub flops: u64,
}

/// Streams the dual pair through every layer and returns the output pair
/// with the activation peak.
pub fn dual_forward(
    model: &Model,
    params: &[f64],
    v: &[f64],
    x: &Tensor,
    fc: &mut FlopCounter,
) -> Result<(DualActivation, u64)> {
    model.check_params(params)?;
    model.check_params(v)?;
    let widths = nn::layer_widths(model, x)?;
    let rows = x.rows();
    let mut meter = MemoryMeter::new();
    let mut cur: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut in_w = x.cols();
    for (i, layer) in model.layers().iter().enumerate() {
        let (s, l) = model.offsets()[i];
        let (y, dy) = match &cur {
            None => layer.tangent(&params[s..s + l], &v[s..s + l], x.data(), None, rows, in_w, fc),
            Some((px, dx)) => {
                layer.tangent(&params[s..s + l], &v[s..s + l], px, Some(dx), rows, in_w, fc)
            }
        };
        meter.alloc(y.len() + dy.len());
        if let Some((px, dx)) = cur.take() {
            meter.free(px.len() + dx.len());
        }
        if dy.iter().any(|t| !t.is_finite()) {
            return Err(Error::overflow(format!("tangent of layer {i} is not finite")));
        }
        in_w = widths[i];
        cur = Some((y, dy));
    }
    let (y, dy) = cur.expect("models are non-empty");
    let shape = vec![rows, in_w];
    Ok((
        DualActivation {
            primal: Tensor::new(shape.clone(), y)?,
            tangent: Tensor::new(shape, dy)?,
        },
        meter.peak(),
    ))
}

/// `δL = v·∇L(w)` without discretization.
pub fn jvp(
    model: &Model,
    params: &[f64],
    batch: &Batch,
    loss: LossSpec,
    v: &[f64],
    fc: &mut FlopCounter,
) -> Result<JvpResult> {
    let start = fc.total();
    let (dual, peak) = dual_forward(model, params, v, &batch.x, fc)?;
    let (value, gy) = nn::evaluate_loss(
        loss,
        dual.primal.data(),
        dual.primal.rows(),
        dual.primal.cols(),
        &batch.target,
        true,
        fc,
    )?;
    let j = finite(kernels::dot(&gy, dual.tangent.data(), fc), "jvp")?;
    Ok(JvpResult {
        jvp: j,
        loss: value,
        peak_act_units: peak,
        flops: fc.since(start),
    })
}

/// Forward gradient `ĝ = jvp·v` along a seeded direction.
pub fn forward_gradient(
    obj: &dyn Objective,
    w: &[f64],
    p: &Perturbation,
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    if p.dim != w.len() {
        return Err(Error::Length {
            expected: w.len(),
            got: p.dim,
        });
    }
    forward_gradient_dir(obj, w, &p.regenerate(), fc)
}

/// Forward gradient along an explicit direction.
pub fn forward_gradient_dir(
    obj: &dyn Objective,
    w: &[f64],
    v: &[f64],
    fc: &mut FlopCounter,
) -> Result<GradEstimate> {
    let start = fc.total();
    let r = obj.jvp(w, v, fc)?;
    let grad: Vec<f64> = v.iter().map(|&vi| r.jvp * vi).collect();
    fc.add(v.len() as u64);
    Ok(GradEstimate {
        grad,
        method: Method::Fmad,
        n: 1,
        epsilon: None,
        jvps: vec![r.jvp],
        loss: r.loss,
        flops: fc.since(start),
        peak_act_units: r.peak_act_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, InitScheme, Target};
    use crate::objective::ModelObjective;
    use crate::reverse_ad::backward_vanilla;

    fn unit_square() -> ModelObjective {
        // L(w) = (w·1)², so ∇L = 2w
        ModelObjective::new(
            Model::parse("linear:1:1:nobias").unwrap(),
            Batch::new(
                Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                Target::Dense(Tensor::new(vec![1, 1], vec![0.0]).unwrap()),
            )
            .unwrap(),
            LossSpec::Mse,
        )
        .unwrap()
    }

    #[test]
    fn jvp_of_square() {
        let o = unit_square();
        let r = o.jvp(&[3.0], &[1.0], &mut FlopCounter::new()).unwrap();
        assert_eq!(r.jvp, 6.0);
        let g = forward_gradient_dir(&o, &[3.0], &[2.0], &mut FlopCounter::new()).unwrap();
        assert_eq!(g.jvps, vec![12.0]);
        assert_eq!(g.grad, vec![24.0]);
    }

    #[test]
    fn aligned_direction_recovers_gradient() {
        let o = unit_square();
        // ∇L(3) = 6, so v = ∇L/‖∇L‖ = 1 gives ĝ = 6
        let g = forward_gradient_dir(&o, &[3.0], &[1.0], &mut FlopCounter::new()).unwrap();
        assert_eq!(g.grad, vec![6.0]);
    }

    #[test]
    fn jvp_is_linear_in_v() {
        let m = Model::parse("linear:2:3,tanh,linear:3:2").unwrap();
        let p = init_params(&m, 2, InitScheme::ScaledUniform);
        let b = Batch::new(
            Tensor::new(vec![2, 2], vec![0.3, -0.4, 1.1, 0.9]).unwrap(),
            Target::Classes(vec![1, 0]),
        )
        .unwrap();
        let o = ModelObjective::new(m.clone(), b.clone(), LossSpec::CrossEntropy).unwrap();
        let v = Perturbation::new(4, m.dim()).regenerate();
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let j1 = o.jvp(&p, &v, &mut FlopCounter::new()).unwrap().jvp;
        let j2 = o.jvp(&p, &v2, &mut FlopCounter::new()).unwrap().jvp;
        assert_eq!(2.0 * j1, j2);
        let g = backward_vanilla(&m, &p, &b, LossSpec::CrossEntropy, &mut FlopCounter::new()).unwrap();
        let dot: f64 = g.grad.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((dot - j1).abs() <= 1e-10 * dot.abs().max(1e-3));
    }

    #[test]
    fn streaming_peak_is_two_adjacent_pairs() {
        let m = Model::parse("linear:3:8,relu,linear:8:2").unwrap();
        let p = init_params(&m, 2, InitScheme::ScaledUniform);
        let x = Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap();
        let (_, peak) = dual_forward(&m, &p, &vec![1.0; m.dim()], &x, &mut FlopCounter::new()).unwrap();
        // relu layer: 2·(16 + 16)
        assert_eq!(peak, 64);
    }
}
