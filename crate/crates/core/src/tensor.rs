//! Dense row-major `f64` tensors and the FLOP counter every engine charges.
//!
//! Counting convention: one multiply, add, subtract, divide or activation
//! evaluation is one FLOP. A `m×k` by `k×n` product is `2·m·k·n`. Comparisons,
//! copies, transposes and random-number generation are free.
//!
//! Reductions and products always accumulate left to right so that two
//! evaluations of the same expression are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running count of floating-point operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    total: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    #[inline]
    pub fn add(&mut self, flops: u64) {
        self.total += flops;
    }

    /// Folds another counter into this one.
    pub fn merge(&mut self, other: &FlopCounter) {
        self.total += other.total;
    }

    /// FLOPs charged since `start` was read from this counter.
    pub fn since(&self, start: u64) -> u64 {
        self.total - start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Length {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    /// Builds a `rows.len() × width` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::Length {
                    expected: width,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), width], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; the batch axis by convention.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of every dimension after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs a matrix".into(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            [n] => Ok((1, *n)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} needs a vector or matrix"),
            }),
        }
    }
}

/// Standard matrix product. Vectors are treated as a single row.
pub fn matmul(a: &Tensor, b: &Tensor, fc: &mut FlopCounter) -> Result<Tensor> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_nn(&a.data, &b.data, m, k, n, &mut out, fc);
    Tensor::new(vec![m, n], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ElementwiseOp {
    #[inline]
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            ElementwiseOp::Div => x / y,
        }
    }
}

/// Right-hand operand of [`elementwise`]: a same-shape tensor or a scalar.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

pub fn elementwise(
    op: ElementwiseOp,
    a: &Tensor,
    b: Operand<'_>,
    fc: &mut FlopCounter,
) -> Result<Tensor> {
    let data = match b {
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                return Err(Error::Shape {
                    op: "elementwise",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| op.apply(x, y))
                .collect()
        }
        Operand::Scalar(s) => a.data.iter().map(|&x| op.apply(x, s)).collect(),
    };
    fc.add(a.len() as u64);
    Tensor::new(a.shape.clone(), data)
}

pub fn add(a: &Tensor, b: &Tensor, fc: &mut FlopCounter) -> Result<Tensor> {
    elementwise(ElementwiseOp::Add, a, Operand::Tensor(b), fc)
}

pub fn sub(a: &Tensor, b: &Tensor, fc: &mut FlopCounter) -> Result<Tensor> {
    elementwise(ElementwiseOp::Sub, a, Operand::Tensor(b), fc)
}

pub fn mul(a: &Tensor, b: &Tensor, fc: &mut FlopCounter) -> Result<Tensor> {
    elementwise(ElementwiseOp::Mul, a, Operand::Tensor(b), fc)
}

pub fn scale(a: &Tensor, s: f64, fc: &mut FlopCounter) -> Result<Tensor> {
    elementwise(ElementwiseOp::Mul, a, Operand::Scalar(s), fc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Left-to-right reduction. Sum charges `n-1` adds, mean one more for the
/// division, max is comparisons only.
pub fn reduce(a: &Tensor, kind: Reduction, fc: &mut FlopCounter) -> Result<f64> {
    let (first, rest) = a
        .data
        .split_first()
        .ok_or(Error::Empty { op: "reduce" })?;
    let n = a.len() as u64;
    Ok(match kind {
        Reduction::Sum => {
            fc.add(n - 1);
            rest.iter().fold(*first, |acc, &x| acc + x)
        }
        Reduction::Mean => {
            fc.add(n);
            rest.iter().fold(*first, |acc, &x| acc + x) / n as f64
        }
        Reduction::Max => rest.iter().fold(*first, |acc, &x| acc.max(x)),
    })
}

/// Slice-level kernels shared by the layer implementations. Every kernel
/// charges its FLOPs and accumulates over the contracted index in ascending
/// order.
pub(crate) mod kernels {
    use super::FlopCounter;

    /// `out[m×n] = a[m×k] · b[k×n]`.
    pub fn matmul_nn(
        a: &[f64],
        b: &[f64],
        m: usize,
        k: usize,
        n: usize,
        out: &mut [f64],
        fc: &mut FlopCounter,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        out.fill(0.0);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        fc.add(2 * (m * k * n) as u64);
    }

    /// `out[m×n] = aᵀ · b` for `a[r×m]`, `b[r×n]`.
    pub fn matmul_tn(
        a: &[f64],
        b: &[f64],
        r: usize,
        m: usize,
        n: usize,
        out: &mut [f64],
        fc: &mut FlopCounter,
    ) {
        debug_assert_eq!(a.len(), r * m);
        debug_assert_eq!(b.len(), r * n);
        debug_assert_eq!(out.len(), m * n);
        out.fill(0.0);
        for s in 0..r {
            let brow = &b[s * n..(s + 1) * n];
            for i in 0..m {
                let asi = a[s * m + i];
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += asi * bv;
                }
            }
        }
        fc.add(2 * (r * m * n) as u64);
    }

    /// `out[m×n] = a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(
        a: &[f64],
        b: &[f64],
        m: usize,
        k: usize,
        n: usize,
        out: &mut [f64],
        fc: &mut FlopCounter,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * n + j] = acc;
            }
        }
        fc.add(2 * (m * k * n) as u64);
    }

    /// Adds `bias[n]` to every row of `out[m×n]`.
    pub fn add_row_bias(out: &mut [f64], bias: &[f64], fc: &mut FlopCounter) {
        let n = bias.len();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        fc.add(out.len() as u64);
    }

    /// `out[n] = Σ_rows g[m×n]`, rows in order.
    pub fn column_sums(g: &[f64], n: usize, out: &mut [f64], fc: &mut FlopCounter) {
        out.fill(0.0);
        for row in g.chunks_exact(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        fc.add(g.len() as u64);
    }

    pub fn dot(a: &[f64], b: &[f64], fc: &mut FlopCounter) -> f64 {
        let mut acc = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
        fc.add(2 * a.len() as u64);
        acc
    }
}
