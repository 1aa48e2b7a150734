//! Problems the experiment harness trains on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, init_params, Batch, InitScheme, LayerSpec, LossSpec, Model, Target};
use crate::objective::{Linear, ModelObjective, Objective, Quadratic};
use crate::seed;
use crate::tensor::{FlopCounter, Tensor};
use crate::zero_order::Perturbation;

/// Description of an objective, independent of any run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObjectiveSpec {
    /// `½ Σ c_i w_i²` with curvatures from `l/kappa` to `l`.
    Quadratic { l: f64, d: usize, kappa: f64 },
    /// `g·w`.
    Linear { g: Vec<f64> },
    /// Softmax regression on Gaussian class clusters.
    LogisticBlobs {
        features: usize,
        classes: usize,
        samples: usize,
        separation: f64,
        data_seed: u64,
        /// Overrides the default bias-free `features → classes` linear model.
        model: Option<String>,
    },
    /// Fit a randomly initialized teacher of the same architecture.
    Regression {
        model: String,
        samples: usize,
        data_seed: u64,
    },
}

impl ObjectiveSpec {
    /// Softmax regression with exactly `d = features·classes` parameters.
    pub fn logistic_blobs(d: usize, classes: usize, data_seed: u64) -> Result<Self> {
        if classes < 2 || !d.is_multiple_of(classes) {
            return Err(Error::Config(format!(
                "d = {d} must be a multiple of the class count {classes}"
            )));
        }
        Ok(ObjectiveSpec::LogisticBlobs {
            features: d / classes,
            classes,
            samples: 256,
            separation: 1.0,
            data_seed,
            model: None,
        })
    }
}

/// Standard normal draws for data generation, kept apart from perturbation
/// streams by a salt.
fn gaussian(seed: u64, salt: u64, n: usize) -> Vec<f64> {
    Perturbation::new(seed::derive(seed, salt, 0x5EED), n).regenerate()
}

/// The problem a run optimizes: a full objective for telemetry plus, for
/// datasets, minibatch views for the estimators.
pub struct Problem {
    kind: Kind,
    batch_size: usize,
}

enum Kind {
    Quadratic(Quadratic),
    Linear(Linear),
    Data {
        full: ModelObjective,
        smoothness: Option<f64>,
        classify: bool,
    },
}

/// Objective used for one iteration.
pub enum BatchObjective<'a> {
    Borrowed(&'a dyn Objective),
    Owned(ModelObjective),
}

impl BatchObjective<'_> {
    pub fn as_dyn(&self) -> &dyn Objective {
        match self {
            BatchObjective::Borrowed(o) => *o,
            BatchObjective::Owned(o) => o,
        }
    }
}

impl Problem {
    /// `batch_size = 0` uses the whole dataset every iteration.
    pub fn build(spec: &ObjectiveSpec, batch_size: usize) -> Result<Self> {
        let kind = match spec {
            ObjectiveSpec::Quadratic { l, d, kappa } => {
                if l.is_nan() || *l <= 0.0 || *d == 0 {
                    return Err(Error::Config("quadratic needs L > 0 and d ≥ 1".into()));
                }
                Kind::Quadratic(Quadratic::ill_conditioned(*l, *kappa, *d)?)
            }
            ObjectiveSpec::Linear { g } => Kind::Linear(Linear::new(g.clone())?),
            ObjectiveSpec::LogisticBlobs {
                features,
                classes,
                samples,
                separation,
                data_seed,
                model,
            } => {
                if *features == 0 || *classes < 2 || *samples == 0 {
                    return Err(Error::Config(
                        "blobs need features ≥ 1, classes ≥ 2 and samples ≥ 1".into(),
                    ));
                }
                let (p, k, n) = (*features, *classes, *samples);
                let centers = gaussian(*data_seed, 1, k * p);
                let noise = gaussian(*data_seed, 2, n * p);
                let mut x = Vec::with_capacity(n * p);
                let mut labels = Vec::with_capacity(n);
                for i in 0..n {
                    let c = i % k;
                    labels.push(c);
                    for j in 0..p {
                        x.push(separation * centers[c * p + j] + noise[i * p + j]);
                    }
                }
                let batch = Batch::new(Tensor::new(vec![n, p], x)?, Target::Classes(labels))?;
                let model = match model {
                    Some(s) => Model::parse(s)?,
                    None => Model::new(vec![LayerSpec::Linear {
                        in_dim: p,
                        out_dim: k,
                        bias: false,
                    }])?,
                };
                let widths = nn::layer_widths(&model, &batch.x)?;
                if widths.last() != Some(&k) {
                    return Err(Error::Config(format!("model must output {k} logits")));
                }
                let linear = matches!(model.layers(), [LayerSpec::Linear { .. }]);
                let smoothness = linear.then(|| 0.5 * gram_lambda_max(&batch.x));
                Kind::Data {
                    full: ModelObjective::new(model, batch, LossSpec::CrossEntropy)?,
                    smoothness,
                    classify: true,
                }
            }
            ObjectiveSpec::Regression {
                model,
                samples,
                data_seed,
            } => {
                let model = Model::parse(model)?;
                let inputs = model
                    .input_width()
                    .ok_or_else(|| Error::Config("regression model needs a linear layer".into()))?;
                let x = Tensor::new(vec![*samples, inputs], gaussian(*data_seed, 3, samples * inputs))?;
                let teacher = init_params(&model, seed::derive(*data_seed, 4, 0), InitScheme::ScaledUniform);
                let (_, y) = nn::forward(&model, &teacher, &x, &mut FlopCounter::new())?;
                let batch = Batch::new(x, Target::Dense(y))?;
                Kind::Data {
                    full: ModelObjective::new(model, batch, LossSpec::Mse)?,
                    smoothness: None,
                    classify: false,
                }
            }
        };
        Ok(Self { kind, batch_size })
    }

    pub fn dim(&self) -> usize {
        self.full().dim()
    }

    pub fn full(&self) -> &dyn Objective {
        match &self.kind {
            Kind::Quadratic(q) => q,
            Kind::Linear(l) => l,
            Kind::Data { full, .. } => full,
        }
    }

    pub fn samples(&self) -> Option<usize> {
        match &self.kind {
            Kind::Data { full, .. } => Some(full.batch.rows()),
            _ => None,
        }
    }

    /// Objective seen at iteration `t`: a cyclic window of `batch_size` rows.
    pub fn batch_objective(&self, t: u64) -> BatchObjective<'_> {
        match &self.kind {
            Kind::Data { full, .. } if self.batch_size > 0 && self.batch_size < full.batch.rows() => {
                let n = full.batch.rows();
                let start = (t as usize).wrapping_mul(self.batch_size) % n;
                let idx: Vec<usize> = (0..self.batch_size).map(|j| (start + j) % n).collect();
                BatchObjective::Owned(ModelObjective {
                    model: full.model.clone(),
                    batch: full.batch.select_rows(&idx),
                    loss: full.loss,
                })
            }
            _ => BatchObjective::Borrowed(self.full()),
        }
    }

    pub fn iterations_per_epoch(&self) -> usize {
        match (self.samples(), self.batch_size) {
            (Some(n), b) if b > 0 && b < n => n.div_ceil(b),
            _ => 1,
        }
    }

    /// Smoothness constant when it is known or can be bounded.
    pub fn smoothness(&self) -> Option<f64> {
        match &self.kind {
            Kind::Quadratic(q) => Some(q.smoothness()),
            Kind::Linear(_) => None,
            Kind::Data { smoothness, .. } => *smoothness,
        }
    }

    /// Starting point for a run.
    pub fn init(&self, run_seed: u64) -> Vec<f64> {
        let s = seed::derive(run_seed, u64::MAX, 0);
        match &self.kind {
            Kind::Quadratic(q) => Perturbation::new(s, q.dim()).regenerate(),
            Kind::Linear(l) => vec![0.0; l.dim()],
            Kind::Data { full, .. } => init_params(&full.model, s, InitScheme::ScaledUniform).into_vec(),
        }
    }

    /// Training accuracy for classification problems.
    pub fn accuracy(&self, w: &[f64]) -> Option<f64> {
        let Kind::Data {
            full, classify: true, ..
        } = &self.kind
        else {
            return None;
        };
        let Target::Classes(labels) = &full.batch.target else {
            return None;
        };
        let (_, y) = nn::forward(&full.model, w, &full.batch.x, &mut FlopCounter::new()).ok()?;
        let k = y.cols();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(r, &c)| {
                let row = &y.data()[r * k..(r + 1) * k];
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == c
            })
            .count();
        Some(correct as f64 / labels.len() as f64)
    }
}

/// Largest eigenvalue of `XᵀX/N` by power iteration.
pub fn gram_lambda_max(x: &Tensor) -> f64 {
    let (n, p) = (x.rows(), x.cols());
    let mut gram = vec![0.0; p * p];
    for r in 0..n {
        let row = &x.data()[r * p..(r + 1) * p];
        for i in 0..p {
            for j in 0..p {
                gram[i * p + j] += row[i] * row[j];
            }
        }
    }
    for g in &mut gram {
        *g /= n as f64;
    }
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut next = vec![0.0; p];
        for i in 0..p {
            for j in 0..p {
                next[i] += gram[i * p + j] * v[j];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        for (a, b) in v.iter_mut().zip(&next) {
            *a = b / norm;
        }
    }
    lambda
}
