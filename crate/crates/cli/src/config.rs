//! Experiment configuration files.
//!
//! A config is a flat TOML document with the sections `[experiment]`,
//! `[objective]`, `[model]`, `[optimizer]` and `[estimator]`:
//!
//! ```toml
//! [experiment]
//! method = "fmad-multiple"
//! iterations = 1000
//! seed = 0
//!
//! [objective]
//! kind = "quadratic"
//! l = 1.0
//! d = 100
//!
//! [optimizer]
//! kind = "sgd"
//! eta = 0.01
//!
//! [estimator]
//! n = 10
//! ```

use std::path::PathBuf;

use gradcost::analysis::{MethodKind, ObjectiveSpec, RunConfig};
use gradcost::optim::{OptimizerConfig, OptimizerKind};
use gradcost::variants::Mode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub objective: ObjectiveSpec,
    pub run: RunConfig,
    /// Minibatch rows per iteration for dataset objectives; 0 is full batch.
    pub batch_size: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    experiment: ExperimentSection,
    objective: ObjectiveSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelSection>,
    optimizer: OptimizerSection,
    #[serde(default)]
    estimator: EstimatorSection,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    method: String,
    iterations: u64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint_segment: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectiveSection {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    spec: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerSection {
    #[serde(default = "sgd")]
    kind: String,
    eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

fn sgd() -> String {
    "sgd".into()
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    accumulate_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    svrg_interval: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    svrg_n_full: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sparse_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adaptive_calibration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rolling_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma2: Option<f64>,
}

/// 1-based line of `key = …` inside `[section]`, if present.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn missing(section: &str, key: &str) -> ConfigError {
    ConfigError {
        line: None,
        message: format!("[{section}] {key} is required for this objective"),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let file: File = toml::from_str(text).map_err(|e| ConfigError {
        line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
        message: e.message().trim().to_string(),
    })?;
    let at = |section: &str, key: &str, message: String| ConfigError {
        line: line_of(text, section, key),
        message,
    };
    let gc = |section: &str, key: &str, e: gradcost::Error| at(section, key, e.to_string());

    let x = &file.experiment;
    let method: MethodKind = x.method.parse().map_err(|e| gc("experiment", "method", e))?;

    let o = &file.objective;
    let model = file.model.as_ref().map(|m| m.spec.clone());
    let objective = match o.kind.as_str() {
        "quadratic" => ObjectiveSpec::Quadratic {
            l: o.l.unwrap_or(1.0),
            d: o.d.ok_or_else(|| missing("objective", "d"))?,
            kappa: o.kappa.unwrap_or(1.0),
        },
        "linear" => ObjectiveSpec::Linear {
            g: o.g.clone().ok_or_else(|| missing("objective", "g"))?,
        },
        "logistic-blobs" => {
            let classes = o.classes.unwrap_or(4);
            let features = match (o.features, o.d) {
                (Some(f), None) => f,
                (None, Some(d)) if classes > 0 && d % classes == 0 => d / classes,
                (None, Some(d)) => {
                    return Err(at(
                        "objective",
                        "d",
                        format!("d = {d} must be a multiple of classes = {classes}"),
                    ))
                }
                (Some(_), Some(_)) => {
                    return Err(at("objective", "d", "give either d or features, not both".into()))
                }
                (None, None) => return Err(missing("objective", "features")),
            };
            ObjectiveSpec::LogisticBlobs {
                features,
                classes,
                samples: o.samples.unwrap_or(256),
                separation: o.separation.unwrap_or(1.0),
                data_seed: o.data_seed.unwrap_or(0),
                model,
            }
        }
        "regression" => ObjectiveSpec::Regression {
            model: model.ok_or_else(|| missing("model", "spec"))?,
            samples: o.samples.unwrap_or(64),
            data_seed: o.data_seed.unwrap_or(0),
        },
        other => {
            return Err(at(
                "objective",
                "kind",
                format!("unknown objective `{other}` (expected quadratic, linear, logistic-blobs or regression)"),
            ))
        }
    };

    let p = &file.optimizer;
    let kind: OptimizerKind = p.kind.parse().map_err(|e| gc("optimizer", "kind", e))?;
    let mut optimizer = OptimizerConfig::new(kind, p.eta);
    optimizer.momentum = p.momentum.unwrap_or(optimizer.momentum);
    optimizer.beta1 = p.beta1.unwrap_or(optimizer.beta1);
    optimizer.beta2 = p.beta2.unwrap_or(optimizer.beta2);
    optimizer.weight_decay = p.weight_decay.unwrap_or(optimizer.weight_decay);
    optimizer.eps = p.eps.unwrap_or(optimizer.eps);
    if !(p.eta > 0.0 && p.eta.is_finite()) {
        return Err(at("optimizer", "eta", format!("eta must be positive, got {}", p.eta)));
    }
    optimizer.validate().map_err(|e| gc("optimizer", "kind", e))?;

    let e = &file.estimator;
    let mut estimator = method.default_estimator();
    estimator.n = e.n.unwrap_or(estimator.n);
    estimator.mode = match e.mode.as_deref() {
        None | Some("sequential") => Mode::Sequential,
        Some("parallel") => Mode::Parallel,
        Some(other) => {
            return Err(at(
                "estimator",
                "mode",
                format!("unknown mode `{other}` (expected sequential or parallel)"),
            ))
        }
    };
    estimator.accumulate_k = e.accumulate_k.unwrap_or(estimator.accumulate_k);
    estimator.svrg_interval = e.svrg_interval.unwrap_or(estimator.svrg_interval);
    estimator.svrg_n_full = e.svrg_n_full.unwrap_or(estimator.svrg_n_full);
    estimator.sparse_fraction = e.sparse_fraction.unwrap_or(estimator.sparse_fraction);
    estimator.adaptive_calibration = e.adaptive_calibration.unwrap_or(estimator.adaptive_calibration);
    estimator.rolling_beta = e.rolling_beta.unwrap_or(estimator.rolling_beta);
    estimator.epsilon = e.epsilon.unwrap_or(estimator.epsilon);
    estimator.sigma2 = e.sigma2.unwrap_or(estimator.sigma2);
    estimator.validate().map_err(|err| ConfigError {
        line: line_of(text, "estimator", "n"),
        message: err.to_string(),
    })?;

    if x.checkpoint_segment == Some(0) {
        return Err(at("experiment", "checkpoint_segment", "checkpoint segment must be at least 1".into()));
    }
    let run = RunConfig {
        method,
        optimizer,
        estimator,
        checkpoint_segment: x.checkpoint_segment,
        iterations: x.iterations,
        seed: x.seed,
    };
    Ok(ExperimentConfig {
        objective,
        run,
        batch_size: x.batch_size,
        out: x.out.as_ref().map(PathBuf::from),
    })
}

/// Writes every setting explicitly, so `parse_config(&serialize_config(c))`
/// reproduces `c`.
pub fn serialize_config(c: &ExperimentConfig) -> String {
    let r = &c.run;
    let mut objective = ObjectiveSection::default();
    let mut model = None;
    match &c.objective {
        ObjectiveSpec::Quadratic { l, d, kappa } => {
            objective.kind = "quadratic".into();
            objective.l = Some(*l);
            objective.d = Some(*d);
            objective.kappa = Some(*kappa);
        }
        ObjectiveSpec::Linear { g } => {
            objective.kind = "linear".into();
            objective.g = Some(g.clone());
        }
        ObjectiveSpec::LogisticBlobs {
            features,
            classes,
            samples,
            separation,
            data_seed,
            model: m,
        } => {
            objective.kind = "logistic-blobs".into();
            objective.features = Some(*features);
            objective.classes = Some(*classes);
            objective.samples = Some(*samples);
            objective.separation = Some(*separation);
            objective.data_seed = Some(*data_seed);
            model = m.clone().map(|spec| ModelSection { spec });
        }
        ObjectiveSpec::Regression {
            model: m,
            samples,
            data_seed,
        } => {
            objective.kind = "regression".into();
            objective.samples = Some(*samples);
            objective.data_seed = Some(*data_seed);
            model = Some(ModelSection { spec: m.clone() });
        }
    }
    let e = &r.estimator;
    let file = File {
        experiment: ExperimentSection {
            method: r.method.to_string(),
            iterations: r.iterations,
            seed: r.seed,
            batch_size: c.batch_size,
            checkpoint_segment: r.checkpoint_segment,
            out: c.out.as_ref().map(|p| p.display().to_string()),
        },
        objective,
        model,
        optimizer: OptimizerSection {
            kind: r.optimizer.kind.name().into(),
            eta: r.optimizer.eta,
            momentum: Some(r.optimizer.momentum),
            beta1: Some(r.optimizer.beta1),
            beta2: Some(r.optimizer.beta2),
            weight_decay: Some(r.optimizer.weight_decay),
            eps: Some(r.optimizer.eps),
        },
        estimator: EstimatorSection {
            n: Some(e.n),
            mode: Some(
                match e.mode {
                    Mode::Sequential => "sequential",
                    Mode::Parallel => "parallel",
                }
                .into(),
            ),
            accumulate_k: Some(e.accumulate_k),
            svrg_interval: Some(e.svrg_interval),
            svrg_n_full: Some(e.svrg_n_full),
            sparse_fraction: Some(e.sparse_fraction),
            adaptive_calibration: Some(e.adaptive_calibration),
            rolling_beta: Some(e.rolling_beta),
            epsilon: Some(e.epsilon),
            sigma2: Some(e.sigma2),
        },
    };
    toml::to_string(&file).expect("config sections serialize")
}
