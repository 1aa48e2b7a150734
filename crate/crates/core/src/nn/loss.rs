use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FlopCounter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSpec {
    /// Mean of squared errors over every element.
    Mse,
    /// Batch mean of `-Σ t·log softmax(y)`.
    CrossEntropy,
}

impl LossSpec {
    pub fn name(self) -> &'static str {
        match self {
            LossSpec::Mse => "mse",
            LossSpec::CrossEntropy => "cross-entropy",
        }
    }
}

impl std::str::FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossSpec::Mse),
            "cross-entropy" | "ce" => Ok(LossSpec::CrossEntropy),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected mse or cross-entropy)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Dense(Tensor),
    Classes(Vec<usize>),
}

impl Target {
    pub fn rows(&self) -> usize {
        match self {
            Target::Dense(t) => t.rows(),
            Target::Classes(c) => c.len(),
        }
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Target {
        match self {
            Target::Dense(t) => {
                let w = t.cols();
                let mut data = Vec::with_capacity(idx.len() * w);
                for &r in idx {
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
                let mut shape = t.shape().to_vec();
                shape[0] = idx.len();
                Target::Dense(Tensor::new(shape, data).expect("row selection keeps shape valid"))
            }
            Target::Classes(c) => Target::Classes(idx.iter().map(|&r| c[r]).collect()),
        }
    }
}

pub fn loss(spec: LossSpec, y: &Tensor, target: &Target, fc: &mut FlopCounter) -> Result<f64> {
    let (value, _) = evaluate(spec, y.data(), y.rows(), y.cols(), target, false, fc)?;
    Ok(value)
}

/// Loss value and, when `want_grad`, its gradient with respect to `y`.
pub(crate) fn evaluate(
    spec: LossSpec,
    y: &[f64],
    rows: usize,
    width: usize,
    target: &Target,
    want_grad: bool,
    fc: &mut FlopCounter,
) -> Result<(f64, Vec<f64>)> {
    validate(spec, rows, width, target)?;
    let (value, grad) = match spec {
        LossSpec::Mse => mse(y, target, want_grad, fc),
        LossSpec::CrossEntropy => cross_entropy(y, rows, width, target, want_grad, fc),
    };
    if !value.is_finite() {
        return Err(Error::overflow(format!("loss evaluated to {value}")));
    }
    Ok((value, grad))
}

fn validate(spec: LossSpec, rows: usize, width: usize, target: &Target) -> Result<()> {
    match target {
        Target::Dense(t) => {
            if t.rows() != rows || t.cols() != width {
                return Err(Error::Shape {
                    op: spec.name(),
                    lhs: vec![rows, width],
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Target::Classes(c) => {
            if spec == LossSpec::Mse {
                return Err(Error::Model("mse needs dense targets".into()));
            }
            if c.len() != rows {
                return Err(Error::Length {
                    expected: rows,
                    got: c.len(),
                });
            }
            if let Some(&index) = c.iter().find(|&&k| k >= width) {
                return Err(Error::InvalidClass {
                    index,
                    classes: width,
                });
            }
        }
    }
    Ok(())
}

fn mse(y: &[f64], target: &Target, want_grad: bool, fc: &mut FlopCounter) -> (f64, Vec<f64>) {
    let Target::Dense(t) = target else {
        unreachable!("validated above")
    };
    let n = y.len() as f64;
    let mut acc = 0.0;
    for (&a, &b) in y.iter().zip(t.data()) {
        let e = a - b;
        acc += e * e;
    }
    fc.add(3 * y.len() as u64 + 1);
    let value = acc / n;
    let grad = if want_grad {
        let scale = 2.0 / n;
        fc.add(2 * y.len() as u64 + 1);
        y.iter()
            .zip(t.data())
            .map(|(&a, &b)| scale * (a - b))
            .collect()
    } else {
        Vec::new()
    };
    (value, grad)
}

fn cross_entropy(
    y: &[f64],
    rows: usize,
    width: usize,
    target: &Target,
    want_grad: bool,
    fc: &mut FlopCounter,
) -> (f64, Vec<f64>) {
    let inv_rows = 1.0 / rows as f64;
    let mut total = 0.0;
    let mut grad = if want_grad {
        vec![0.0; y.len()]
    } else {
        Vec::new()
    };
    let mut exps = vec![0.0; width];
    for r in 0..rows {
        let row = &y[r * width..(r + 1) * width];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (e, &v) in exps.iter_mut().zip(row) {
            *e = (v - m).exp();
            sum += *e;
        }
        let lse = sum.ln();
        // shift, exp, sum, log
        fc.add(3 * width as u64 + 1);
        let (row_loss, mass) = match target {
            Target::Classes(c) => {
                fc.add(2);
                (-(row[c[r]] - m - lse), 1.0)
            }
            Target::Dense(t) => {
                let trow = &t.data()[r * width..(r + 1) * width];
                let mut l = 0.0;
                let mut mass = 0.0;
                for (&tk, &v) in trow.iter().zip(row) {
                    l -= tk * (v - m - lse);
                    mass += tk;
                }
                fc.add(5 * width as u64);
                (l, mass)
            }
        };
        total += row_loss;
        fc.add(1);
        if want_grad {
            let g = &mut grad[r * width..(r + 1) * width];
            for (k, (gk, &e)) in g.iter_mut().zip(&exps).enumerate() {
                let t = match target {
                    Target::Classes(c) => {
                        if c[r] == k {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Target::Dense(t) => t.data()[r * width + k],
                };
                *gk = (e / sum * mass - t) * inv_rows;
            }
            fc.add(4 * width as u64);
        }
    }
    fc.add(1);
    (total * inv_rows, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(data: &[f64]) -> Tensor {
        Tensor::new(vec![1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let mut fc = FlopCounter::new();
        let y = row(&[1.0, 3.0]);
        assert_eq!(loss(LossSpec::Mse, &y, &Target::Dense(y.clone()), &mut fc).unwrap(), 0.0);
        let z = Target::Dense(row(&[0.0, 0.0]));
        assert_eq!(loss(LossSpec::Mse, &y, &z, &mut fc).unwrap(), 5.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let y = row(&[0.0, 0.0]);
        let l = loss(
            LossSpec::CrossEntropy,
            &y,
            &Target::Classes(vec![0]),
            &mut FlopCounter::new(),
        )
        .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let dense = Target::Dense(row(&[1.0, 0.0]));
        let l2 = loss(LossSpec::CrossEntropy, &y, &dense, &mut FlopCounter::new()).unwrap();
        assert!((l - l2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_survives_large_logits() {
        let y = row(&[1000.0, -1000.0]);
        let l = loss(
            LossSpec::CrossEntropy,
            &y,
            &Target::Classes(vec![0]),
            &mut FlopCounter::new(),
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn invalid_class_rejected() {
        let y = row(&[0.0, 0.0]);
        let err = loss(
            LossSpec::CrossEntropy,
            &y,
            &Target::Classes(vec![2]),
            &mut FlopCounter::new(),
        )
        .unwrap_err();
        assert_eq!(err, Error::InvalidClass { index: 2, classes: 2 });
    }

    #[test]
    fn gradients_match_differences() {
        let y = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let targets = [
            (LossSpec::CrossEntropy, Target::Classes(vec![2, 0])),
            (
                LossSpec::Mse,
                Target::Dense(Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.0]).unwrap()),
            ),
        ];
        for (spec, t) in targets {
            let mut fc = FlopCounter::new();
            let (_, g) = evaluate(spec, &y, 2, 3, &t, true, &mut fc).unwrap();
            for k in 0..y.len() {
                let h = 1e-6;
                let mut up = y.clone();
                up[k] += h;
                let mut dn = y.clone();
                dn[k] -= h;
                let fu = evaluate(spec, &up, 2, 3, &t, false, &mut fc).unwrap().0;
                let fd = evaluate(spec, &dn, 2, 3, &t, false, &mut fc).unwrap().0;
                assert!(((fu - fd) / (2.0 * h) - g[k]).abs() < 1e-8);
            }
        }
    }
}
