use thiserror::Error;

/// Errors raised by the gradient engines and their supporting types.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op} on an empty tensor")]
    Empty { op: &'static str },

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("class index {index} out of range for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    /// A loss, tangent or gradient left the finite range.
    #[error("non-finite value: {context}")]
    Overflow { context: String },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid checkpoint plan: {0}")]
    Plan(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("snapshot is {age} iterations old, refresh interval is {interval}")]
    StaleSnapshot { age: usize, interval: usize },

    #[error("step size {eta} violates the admissibility threshold {threshold}")]
    Threshold { eta: f64, threshold: f64 },
}

impl Error {
    pub(crate) fn overflow(context: impl Into<String>) -> Self {
        Error::Overflow {
            context: context.into(),
        }
    }

    /// Prefixes the context of an overflow error; other variants pass through.
    pub fn with_context(self, prefix: impl std::fmt::Display) -> Self {
        match self {
            Error::Overflow { context } => Error::Overflow {
                context: format!("{prefix}: {context}"),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
