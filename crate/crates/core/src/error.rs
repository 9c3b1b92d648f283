//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Every variant maps to a stable machine-readable code (see [`Error::code`])
/// so that scripts driving the CLI can match on `error_code: message` lines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported lead count {found} (expected {expected})")]
    UnsupportedLeadCount { found: usize, expected: usize },
    #[error("signal size mismatch for {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no valid records in {0}")]
    EmptyDataset(PathBuf),
    #[error("bad portable record: {0}")]
    BadFormat(String),

    #[error("invalid cutoff: {0}")]
    InvalidCutoff(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty target row {0}")]
    EmptyTarget(usize),
    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("loss is detached: {0}")]
    DetachedLoss(String),
    #[error("no gradients populated")]
    NoGradients,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("loss diverged at epoch {epoch}, step {step}: {loss}")]
    DivergedLoss { epoch: usize, step: usize, loss: f64 },

    #[error("source domain {0} has no records")]
    EmptySource(String),
    #[error("label map mismatch: {0}")]
    LabelMapMismatch(String),
    #[error("domain overlap: {0}")]
    DomainOverlap(String),
    #[error("unknown class code {0}")]
    UnknownClass(String),
    #[error("gradient check failed for {0}")]
    GradcheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable snake-case identifier for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedHeader(_) => "malformed_header",
            Error::UnsupportedLeadCount { .. } => "unsupported_lead_count",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::Io { .. } => "io_failure",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::BadFormat(_) => "bad_format",
            Error::InvalidCutoff(_) => "invalid_cutoff",
            Error::NonFiniteInput(_) => "non_finite_input",
            Error::InvalidRate(_) => "invalid_rate",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptyTarget(_) => "empty_target",
            Error::NotScalar(_) => "not_scalar",
            Error::DetachedLoss(_) => "detached_loss",
            Error::NoGradients => "no_gradients",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::OutOfRange(_) => "out_of_range",
            Error::EmptySplit(_) => "empty_split",
            Error::DivergedLoss { .. } => "diverged_loss",
            Error::EmptySource(_) => "empty_source",
            Error::LabelMapMismatch(_) => "label_map_mismatch",
            Error::DomainOverlap(_) => "domain_overlap",
            Error::UnknownClass(_) => "unknown_class",
            Error::GradcheckFailed(_) => "gradcheck_failed",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
