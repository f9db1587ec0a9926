use thiserror::Error;

use crate::diffcore::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{context}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("ignore mask covers all {0} entries")]
    AllIgnored(usize),
    #[error("target {value} at index {index} is not binary")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("potential category set is empty")]
    EmptyPcSet,
    #[error("potential category set contains the virtual slot")]
    VirtualInPcSet,
    #[error("potential category set covers every class; nothing to train")]
    PcCoversAll,
    #[error("feature vector has zero norm")]
    ZeroNormFeature,
    #[error("classifier weight {0} has zero norm")]
    ZeroNormWeight(usize),
    #[error("magnitude must be positive, got {0}")]
    InvalidMagnitude(f64),
    #[error("degenerate box [{a1}, {b1}, {a2}, {b2}]")]
    DegenerateBox { a1: f64, b1: f64, a2: f64, b2: f64 },
    #[error("batch variance {value} at index {index} is not positive")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("labelled batch is empty")]
    EmptyLabelledBatch,
    #[error("label budget {budget} exceeds the {available} pixels of class {class}")]
    BudgetExceeded {
        class: usize,
        budget: usize,
        available: usize,
    },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }
}
