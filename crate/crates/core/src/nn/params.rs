use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Activation, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture of a chain model. Parameters live in a separate
/// [`ParamVector`] so one model can be evaluated at many points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<LayerSpec>,
    offsets: Vec<(usize, usize)>,
    dim: usize,
}

impl Model {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Model("a model needs at least one layer".into()));
        }
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let LayerSpec::Linear {
                in_dim, out_dim, ..
            } = *layer
            {
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::Model(format!("layer {i} has a zero dimension")));
                }
                if let Some(w) = width {
                    if w != in_dim {
                        return Err(Error::Model(format!(
                            "layer {i} expects width {in_dim} but receives {w}"
                        )));
                    }
                }
                width = Some(out_dim);
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut start = 0;
        for layer in &layers {
            let len = layer.param_len();
            offsets.push((start, len));
            start += len;
        }
        Ok(Self {
            layers,
            offsets,
            dim: start,
        })
    }

    /// Parses a comma-separated description such as
    /// `linear:2:32,tanh,linear:32:4`. A linear layer takes an optional
    /// fourth field `nobias`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for token in spec.split(',').map(str::trim) {
            let parts: Vec<&str> = token.split(':').collect();
            let layer = match parts.as_slice() {
                ["tanh"] => LayerSpec::Activation(Activation::Tanh),
                ["relu"] => LayerSpec::Activation(Activation::Relu),
                ["softplus"] => LayerSpec::Activation(Activation::Softplus),
                ["linear", a, b, rest @ ..] => {
                    let bias = match rest {
                        [] | ["bias"] => true,
                        ["nobias"] => false,
                        _ => return Err(Error::Model(format!("bad layer `{token}`"))),
                    };
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::Model(format!("bad dimension `{s}` in `{token}`")))
                    };
                    LayerSpec::Linear {
                        in_dim: parse(a)?,
                        out_dim: parse(b)?,
                        bias,
                    }
                }
                _ => return Err(Error::Model(format!("unknown layer `{token}`"))),
            };
            layers.push(layer);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of layer boundaries available for checkpointing.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Trainable parameter count `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    /// Input width fixed by the first linear layer, if any.
    pub fn input_width(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match *l {
            LayerSpec::Linear { in_dim, .. } => Some(in_dim),
            LayerSpec::Activation(_) => None,
        })
    }

    /// Output width of every layer for inputs of width `in_w`.
    pub fn widths(&self, in_w: usize) -> Result<Vec<usize>> {
        let mut w = in_w;
        self.layers
            .iter()
            .map(|l| {
                w = l.out_width(w)?;
                Ok(w)
            })
            .collect()
    }

    pub(crate) fn layer_params<'a>(&self, params: &'a [f64], i: usize) -> &'a [f64] {
        let (s, l) = self.offsets[i];
        &params[s..s + l]
    }

    pub(crate) fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.dim {
            return Err(Error::Length {
                expected: self.dim,
                got: params.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match *layer {
                LayerSpec::Linear {
                    in_dim,
                    out_dim,
                    bias,
                } => {
                    write!(f, "linear:{in_dim}:{out_dim}")?;
                    if !bias {
                        f.write_str(":nobias")?;
                    }
                }
                LayerSpec::Activation(a) => f.write_str(a.name())?,
            }
        }
        Ok(())
    }
}

/// Flattened trainable parameters with per-layer `(start, length)` offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    data: Vec<f64>,
    offsets: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn new(model: &Model, data: Vec<f64>) -> Result<Self> {
        model.check_params(&data)?;
        Ok(Self {
            data,
            offsets: model.offsets.clone(),
        })
    }

    pub fn zeros(model: &Model) -> Self {
        Self {
            data: vec![0.0; model.dim],
            offsets: model.offsets.clone(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        let (s, l) = self.offsets[i];
        &self.data[s..s + l]
    }

    /// Per-layer tensors: `[W, b]`, `[W]` without bias, `[]` for activations.
    pub fn unflatten(&self, model: &Model) -> Result<Vec<Vec<Tensor>>> {
        model.check_params(&self.data)?;
        model
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match *layer {
                LayerSpec::Linear {
                    in_dim,
                    out_dim,
                    bias,
                } => {
                    let p = self.layer(i);
                    let mut out = vec![Tensor::new(
                        vec![in_dim, out_dim],
                        p[..in_dim * out_dim].to_vec(),
                    )?];
                    if bias {
                        out.push(Tensor::new(vec![out_dim], p[in_dim * out_dim..].to_vec())?);
                    }
                    Ok(out)
                }
                LayerSpec::Activation(_) => Ok(Vec::new()),
            })
            .collect()
    }

    pub fn flatten(model: &Model, layers: &[Vec<Tensor>]) -> Result<Self> {
        if layers.len() != model.depth() {
            return Err(Error::Length {
                expected: model.depth(),
                got: layers.len(),
            });
        }
        let mut data = Vec::with_capacity(model.dim);
        for ((spec, tensors), &(_, len)) in model.layers.iter().zip(layers).zip(&model.offsets) {
            let got: usize = tensors.iter().map(Tensor::len).sum();
            if got != len {
                return Err(Error::Length { expected: len, got });
            }
            if let LayerSpec::Linear { in_dim, out_dim, .. } = *spec {
                if tensors[0].shape() != [in_dim, out_dim] {
                    return Err(Error::Shape {
                        op: "flatten",
                        lhs: vec![in_dim, out_dim],
                        rhs: tensors[0].shape().to_vec(),
                    });
                }
            }
            for t in tensors {
                data.extend_from_slice(t.data());
            }
        }
        Self::new(model, data)
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on `[-1/√in_dim, 1/√in_dim]` for weights and biases.
    #[default]
    ScaledUniform,
}

pub fn init_params(model: &Model, seed: u64, scheme: InitScheme) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(model);
    for (layer, &(start, len)) in model.layers.iter().zip(&model.offsets) {
        if let LayerSpec::Linear { in_dim, .. } = *layer {
            let bound = match scheme {
                InitScheme::ScaledUniform => 1.0 / (in_dim as f64).sqrt(),
            };
            for p in &mut params.data[start..start + len] {
                *p = rng.gen_range(-bound..=bound);
            }
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        let m = Model::parse("linear:2:32,tanh,linear:32:4:nobias,relu,softplus").unwrap();
        assert_eq!(m.depth(), 5);
        assert_eq!(m.dim(), 2 * 32 + 32 + 32 * 4);
        assert_eq!(Model::parse(&m.to_string()).unwrap(), m);
    }

    #[test]
    fn chain_dims_must_agree() {
        assert!(Model::parse("linear:2:3,tanh,linear:4:1").is_err());
        assert!(Model::parse("conv:3").is_err());
        assert!(Model::parse("linear:2:x").is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(
            Model::parse("linear:2:3:nobias,linear:3:1:nobias").unwrap().dim(),
            9
        );
        assert_eq!(Model::parse("linear:2:3,linear:3:1").unwrap().dim(), 13);
    }

    #[test]
    fn offsets_are_contiguous() {
        let m = Model::parse("linear:3:4,tanh,linear:4:2").unwrap();
        let mut next = 0;
        for &(s, l) in m.offsets() {
            assert_eq!(s, next);
            next = s + l;
        }
        assert_eq!(next, m.dim());
    }

    #[test]
    fn unflatten_round_trip() {
        let m = Model::parse("linear:2:3,tanh,linear:3:1:nobias").unwrap();
        let p = init_params(&m, 3, InitScheme::ScaledUniform);
        let layers = p.unflatten(&m).unwrap();
        assert_eq!(layers[0][0].shape(), &[2, 3]);
        assert_eq!(layers[0][1].shape(), &[3]);
        assert!(layers[1].is_empty());
        assert_eq!(ParamVector::flatten(&m, &layers).unwrap(), p);
    }

    #[test]
    fn flatten_rejects_wrong_lengths() {
        let m = Model::parse("linear:2:1:nobias").unwrap();
        let bad = vec![vec![Tensor::vector(vec![1.0]).unwrap()]];
        assert!(matches!(
            ParamVector::flatten(&m, &bad),
            Err(Error::Length { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let m = Model::parse("linear:4:8,relu,linear:8:2").unwrap();
        let a = init_params(&m, 1, InitScheme::ScaledUniform);
        let b = init_params(&m, 1, InitScheme::ScaledUniform);
        let c = init_params(&m, 2, InitScheme::ScaledUniform);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layer(0).iter().all(|x| x.abs() <= 0.5));
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.layer(2).iter().all(|x| x.abs() <= bound));
    }
}
