//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid rule: {0}")]
    InvalidRule(String),

    #[error("rule config has {actual} entries but the model has {expected} trainable layers")]
    ConfigLength { expected: usize, actual: usize },

    #[error("target class {class} out of range (model has {n_classes} classes)")]
    InvalidTargetClass { class: usize, n_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("model file error in field `{field}`: {reason}")]
    ModelFile { field: String, reason: String },

    #[error("degenerate metric input: {0}")]
    DegenerateMetric(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("object placement failed: {0}")]
    Placement(String),

    #[error("singular regression system: {0}")]
    SingularSystem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
