//! Right-hand sides of the convergence bounds for exact, forward-mode and
//! zero-order gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{bp_max_eta, max_stable_eta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundMethod {
    Bp,
    Fmad,
    Zo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub l: f64,
    pub eta: f64,
    pub d: usize,
    pub n: usize,
    pub t: u64,
    pub f_first: f64,
    pub f_last: f64,
    /// Finite-difference step; only the zero-order bound uses it.
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryBound {
    pub method: BoundMethod,
    pub rhs: f64,
    pub inputs: BoundInputs,
}

/// Bound on `min_t ‖∇f(w_t)‖²`.
///
/// * exact: `2L/T·(f(w₁) − f(w_T))` for `0 < η ≤ 1/L`
/// * forward mode: `(f(w₁) − f(w_T)) / (ηT·[1 − Lη/2·(1 + (d+1)/n)])`
/// * zero order: the forward-mode term plus `L·d·η²/(2n)·ε²`; the constant
///   hidden in the `O(ε²)` is taken to be 1.
///
/// The stochastic bounds require `η < 2/(L(1 + (d+1)/n))`.
pub fn theorem_bound(method: BoundMethod, inputs: BoundInputs) -> Result<TheoryBound> {
    let BoundInputs {
        l,
        eta,
        d,
        n,
        t,
        f_first,
        f_last,
        epsilon,
    } = inputs;
    if l.is_nan() || l <= 0.0 || t == 0 || n == 0 {
        return Err(Error::Config("bounds need L > 0, T ≥ 1 and n ≥ 1".into()));
    }
    let gap = f_first - f_last;
    let rhs = match method {
        BoundMethod::Bp => {
            let threshold = bp_max_eta(l);
            if !(eta > 0.0 && eta <= threshold) {
                return Err(Error::Threshold { eta, threshold });
            }
            2.0 * l / t as f64 * gap
        }
        BoundMethod::Fmad | BoundMethod::Zo => {
            let threshold = max_stable_eta(l, d, n);
            if !(eta > 0.0 && eta < threshold) {
                return Err(Error::Threshold { eta, threshold });
            }
            let ratio = 1.0 + (d as f64 + 1.0) / n as f64;
            let bracket = 1.0 - l * eta / 2.0 * ratio;
            let main = gap / (eta * t as f64 * bracket);
            if method == BoundMethod::Zo {
                main + l * d as f64 * eta * eta / (2.0 * n as f64) * epsilon * epsilon
            } else {
                main
            }
        }
    };
    Ok(TheoryBound {
        method,
        rhs,
        inputs,
    })
}

/// Mean over seeds of `min_t ‖∇f(w_t)‖²` compared against the bound.
pub fn check_bound(min_grad_norms: &[f64], bound: &TheoryBound) -> bool {
    if min_grad_norms.is_empty() {
        return false;
    }
    let mean = min_grad_norms.iter().sum::<f64>() / min_grad_norms.len() as f64;
    mean <= bound.rhs
}
