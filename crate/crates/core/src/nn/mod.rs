//! Chain models `y_i = f_i(w_i, y_{i-1})`, losses and flattened parameters.
//!
//! Inputs are stacked along the leading axis, so an activation of a batch of
//! `b` rows at width `c` occupies `b·c` activation units.

mod layer;
mod loss;
mod params;

pub use layer::{Activation, LayerSpec};
pub use loss::{loss, LossSpec, Target};
pub use params::{init_params, InitScheme, Model, ParamVector};

pub(crate) use loss::evaluate as evaluate_loss;

use crate::error::{Error, Result};
use crate::tensor::{FlopCounter, Tensor};

/// Inputs and targets for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub target: Target,
}

impl Batch {
    pub fn new(x: Tensor, target: Target) -> Result<Self> {
        if x.rows() != target.rows() {
            return Err(Error::Length {
                expected: x.rows(),
                got: target.rows(),
            });
        }
        Ok(Self { x, target })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Batch {
        let w = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &r in idx {
            data.extend_from_slice(&self.x.data()[r * w..(r + 1) * w]);
        }
        Batch {
            x: Tensor::new(vec![idx.len(), w], data).expect("row selection keeps shape valid"),
            target: self.target.select_rows(idx),
        }
    }
}

/// Checks `x` against the model and returns every layer's output width.
pub(crate) fn layer_widths(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    if x.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "inputs must be a rows × features matrix".into(),
        });
    }
    if let Some(w) = model.input_width() {
        if w != x.cols() {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![w],
            });
        }
    }
    model.widths(x.cols())
}

/// Plain forward pass. Returns every layer output `y_1..y_D` followed by a
/// copy of the last one.
pub fn forward(
    model: &Model,
    params: &[f64],
    x: &Tensor,
    fc: &mut FlopCounter,
) -> Result<(Vec<Tensor>, Tensor)> {
    model.check_params(params)?;
    let widths = layer_widths(model, x)?;
    let rows = x.rows();
    let mut acts: Vec<Tensor> = Vec::with_capacity(model.depth());
    let mut in_w = x.cols();
    for (i, layer) in model.layers().iter().enumerate() {
        let input = acts.last().map_or(x.data(), |t| t.data());
        let y = layer.forward(model.layer_params(params, i), input, rows, in_w, fc);
        acts.push(Tensor::new(vec![rows, widths[i]], y)?);
        in_w = widths[i];
    }
    let out = acts.last().expect("models are non-empty").clone();
    Ok((acts, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    #[test]
    fn identity_linear_layer() {
        let m = Model::parse("linear:2:2:nobias").unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (_, y) = forward(&m, &[1.0, 0.0, 0.0, 1.0], &x, &mut FlopCounter::new()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn two_layer_chain_matches_composed_matmuls() {
        let m = Model::parse("linear:2:3:nobias,linear:3:1:nobias").unwrap();
        let p = init_params(&m, 11, InitScheme::ScaledUniform);
        let x = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (acts, y) = forward(&m, &p, &x, &mut FlopCounter::new()).unwrap();
        let layers = p.unflatten(&m).unwrap();
        let mut fc = FlopCounter::new();
        let h = matmul(&x, &layers[0][0], &mut fc).unwrap();
        let oracle = matmul(&h, &layers[1][0], &mut fc).unwrap();
        assert_eq!(acts[0], h);
        assert_eq!(y, oracle);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let m = Model::parse("tanh").unwrap();
        let x = Tensor::zeros(vec![1, 3]).unwrap();
        let (_, y) = forward(&m, &[], &x, &mut FlopCounter::new()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_rejected() {
        let m = Model::parse("linear:3:1").unwrap();
        let x = Tensor::zeros(vec![1, 2]).unwrap();
        assert!(matches!(
            forward(&m, &[0.0; 4], &x, &mut FlopCounter::new()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn activation_sizes_sum_to_vanilla_footprint() {
        let m = Model::parse("linear:3:5,tanh,linear:5:2").unwrap();
        let x = Tensor::zeros(vec![4, 3]).unwrap();
        let p = init_params(&m, 0, InitScheme::ScaledUniform);
        let (acts, _) = forward(&m, &p, &x, &mut FlopCounter::new()).unwrap();
        let total: usize = acts.iter().map(Tensor::len).sum();
        assert_eq!(total, 4 * (5 + 5 + 2));
    }
}
