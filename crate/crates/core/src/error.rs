use thiserror::Error;

use crate::checkpoint::Diagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}")]
    DTypeMismatch { op: &'static str },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("zero denominator in {op}")]
    ZeroDenominator { op: &'static str },

    #[error("cannot shrink dimension: target {to} < source {from}")]
    Shrink { from: usize, to: usize },

    #[error("column split violates its sum constraint (relative error {rel_err:e})")]
    SplitConstraint { rel_err: f64 },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid expansion plan: {0}")]
    InvalidPlan(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("weights inconsistent with spec: {0}")]
    InconsistentWeights(String),

    #[error("missing duplicate map: {0}")]
    MissingMap(String),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed tensor table: {0}")]
    MalformedTable(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("header validation failed: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidHeader(Vec<Diagnostic>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code, used by the CLI and by corruption tests.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::DTypeMismatch { .. } => "dtype-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::ZeroDenominator { .. } => "zero-denominator",
            Error::Shrink { .. } => "shrink",
            Error::SplitConstraint { .. } => "split-constraint",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::InvalidPlan(_) => "invalid-plan",
            Error::InvalidSchedule(_) => "invalid-schedule",
            Error::TokenOutOfRange { .. } => "token-out-of-range",
            Error::Incompatible(_) => "incompatible",
            Error::InconsistentWeights(_) => "inconsistent-weights",
            Error::MissingMap(_) => "missing-map",
            Error::BadMagic => "bad-magic",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::MalformedTable(_) => "malformed-table",
            Error::TruncatedPayload(_) => "truncated-payload",
            Error::InvalidHeader(_) => "malformed-table",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by bad arguments rather than bad files.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::InvalidPlan(_)
                | Error::InvalidSchedule(_)
                | Error::Shrink { .. }
                | Error::Incompatible(_)
                | Error::TokenOutOfRange { .. }
        )
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
