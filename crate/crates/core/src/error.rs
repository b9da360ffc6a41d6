use std::fmt;

use thiserror::Error;

/// Why a raw case file was refused during cleaning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// A contiguous run of missing or invalid samples longer than the allowed gap.
    Gap,
    /// The record lacks the induction start or the recovery tail.
    Partial,
    /// The file does not follow the case CSV layout.
    Malformed,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Gap => "gap",
            RejectReason::Partial => "partial",
            RejectReason::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid patient covariates: {0}")]
    InvalidPatient(String),
    #[error("lean body mass evaluates to {0:.3} kg")]
    NonPositiveLbm(f64),
    #[error("pharmacokinetic parameter {name} evaluates to {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },
    #[error("concentration fell to {value:e} at step {step}; integration is unstable")]
    NegativeConcentration { step: usize, value: f64 },
    #[error("misaligned series: {0}")]
    MisalignedSeries(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("target {0} outside [0, 100]")]
    OutOfRangeTarget(f64),
    #[error("label density has no mass")]
    EmptyDensity,
    #[error("non-finite objective input")]
    NonFiniteInput,

    #[error("case {case_id} rejected ({reason}): {detail}")]
    RejectedCase {
        case_id: String,
        reason: RejectReason,
        detail: String,
    },
    #[error("case {0} has no propofol infusion")]
    EmptyCase(String),
    #[error("series of length {len} is too short (need at least {min})")]
    SeriesTooShort { len: usize, min: usize },
    #[error("normalization constants are required")]
    MissingNorms,

    #[error("missing period anchor: {0}")]
    MissingAnchor(String),
    #[error("true value at index {0} is zero")]
    ZeroTrueValue(usize),
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("window of {window} samples exceeds series of length {len}")]
    WindowExceedsSeries { window: usize, len: usize },

    #[error("invalid file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
