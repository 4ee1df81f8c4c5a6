use crate::{ClassId, InstanceId};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid feature set: {0}")]
    InvalidFeatureSet(String),

    #[error("row {0} has (near-)zero norm")]
    ZeroNormRow(usize),

    #[error("class {0} has no old features")]
    MissingClass(ClassId),

    #[error("query {0} has no positive in the gallery")]
    NoPositive(usize),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("instance {0} has no aligned counterpart")]
    InstanceMismatch(InstanceId),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported setting {0:?}")]
    UnsupportedSetting(String),

    #[error("need {needed} classes, only {available} available")]
    TooFewClasses { needed: usize, available: usize },

    #[error("ranking contains no relevant item")]
    NoRelevant,

    #[error("query label {0} has no positive in the gallery")]
    MissingPositive(ClassId),

    #[error("embedding dimensions differ: {0} vs {1}")]
    EmbedDimMismatch(usize, usize),

    #[error("loss function returned a non-finite value")]
    NonFinite,

    #[error("model format error: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
