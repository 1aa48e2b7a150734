use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, FlopCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative at pre-activation `x` with output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }
}

/// One link of a chain model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// `y = x·W + b` with `W` stored `in_dim × out_dim`, followed by `b`.
    Linear {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    Activation(Activation),
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Linear {
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn param_len(&self) -> usize {
        match *self {
            LayerSpec::Linear {
                in_dim,
                out_dim,
                bias,
            } => in_dim * out_dim + if bias { out_dim } else { 0 },
            LayerSpec::Activation(_) => 0,
        }
    }

    pub fn out_width(&self, in_width: usize) -> Result<usize> {
        match *self {
            LayerSpec::Linear {
                in_dim, out_dim, ..
            } => {
                if in_dim != in_width {
                    return Err(Error::Shape {
                        op: "linear",
                        lhs: vec![in_width],
                        rhs: vec![in_dim, out_dim],
                    });
                }
                Ok(out_dim)
            }
            LayerSpec::Activation(_) => Ok(in_width),
        }
    }

    /// Primal evaluation over `rows` stacked inputs of width `in_w`.
    pub(crate) fn forward(
        &self,
        p: &[f64],
        x: &[f64],
        rows: usize,
        in_w: usize,
        fc: &mut FlopCounter,
    ) -> Vec<f64> {
        match *self {
            LayerSpec::Linear {
                in_dim,
                out_dim,
                bias,
            } => {
                debug_assert_eq!(in_w, in_dim);
                let (w, b) = p.split_at(in_dim * out_dim);
                let mut y = vec![0.0; rows * out_dim];
                kernels::matmul_nn(x, w, rows, in_dim, out_dim, &mut y, fc);
                if bias {
                    kernels::add_row_bias(&mut y, b, fc);
                }
                y
            }
            LayerSpec::Activation(a) => {
                fc.add(x.len() as u64);
                x.iter().map(|&v| a.apply(v)).collect()
            }
        }
    }

    /// Vector-Jacobian products. Writes the parameter gradient into `gp` and
    /// returns the gradient with respect to the input.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        y: &[f64],
        gy: &[f64],
        rows: usize,
        gp: &mut [f64],
        fc: &mut FlopCounter,
    ) -> Vec<f64> {
        match *self {
            LayerSpec::Linear {
                in_dim,
                out_dim,
                bias,
            } => {
                let (w, _) = p.split_at(in_dim * out_dim);
                let (gw, gb) = gp.split_at_mut(in_dim * out_dim);
                kernels::matmul_tn(x, gy, rows, in_dim, out_dim, gw, fc);
                if bias {
                    kernels::column_sums(gy, out_dim, gb, fc);
                }
                let mut gx = vec![0.0; rows * in_dim];
                kernels::matmul_nt(gy, w, rows, out_dim, in_dim, &mut gx, fc);
                gx
            }
            LayerSpec::Activation(a) => {
                // derivative evaluation plus one multiply per element
                fc.add(2 * x.len() as u64);
                x.iter()
                    .zip(y)
                    .zip(gy)
                    .map(|((&xi, &yi), &g)| g * a.derivative(xi, yi))
                    .collect()
            }
        }
    }

    /// Primal and tangent outputs. `dx = None` means the input tangent is
    /// zero, which is the case for the data entering the first layer.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn tangent(
        &self,
        p: &[f64],
        dp: &[f64],
        x: &[f64],
        dx: Option<&[f64]>,
        rows: usize,
        in_w: usize,
        fc: &mut FlopCounter,
    ) -> (Vec<f64>, Vec<f64>) {
        let y = self.forward(p, x, rows, in_w, fc);
        match *self {
            LayerSpec::Linear {
                in_dim,
                out_dim,
                bias,
            } => {
                let (w, _) = p.split_at(in_dim * out_dim);
                let (dw, db) = dp.split_at(in_dim * out_dim);
                let mut dy = vec![0.0; rows * out_dim];
                kernels::matmul_nn(x, dw, rows, in_dim, out_dim, &mut dy, fc);
                if let Some(dx) = dx {
                    let mut carried = vec![0.0; rows * out_dim];
                    kernels::matmul_nn(dx, w, rows, in_dim, out_dim, &mut carried, fc);
                    for (d, c) in dy.iter_mut().zip(&carried) {
                        *d += c;
                    }
                    fc.add(dy.len() as u64);
                }
                if bias {
                    kernels::add_row_bias(&mut dy, db, fc);
                }
                (y, dy)
            }
            LayerSpec::Activation(a) => {
                let dy = match dx {
                    Some(dx) => {
                        fc.add(2 * dx.len() as u64);
                        x.iter()
                            .zip(&y)
                            .zip(dx)
                            .map(|((&xi, &yi), &d)| d * a.derivative(xi, yi))
                            .collect()
                    }
                    None => vec![0.0; y.len()],
                };
                (y, dy)
            }
        }
    }
}
