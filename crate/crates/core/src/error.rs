//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("caption refers to unknown image id `{0}`")]
    UnknownImage(String),

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("prompt has no pseudo-token slot")]
    MissingSlot,

    #[error("infeasible crop geometry: {0}")]
    InfeasibleCrop(String),

    #[error("crop box {0} lies outside the image bounds")]
    OutOfBounds(String),

    #[error("infeasible world layout: {0}")]
    InfeasibleLayout(String),

    #[error("batch too small: need at least {min}, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("input rows are not unit-norm (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("forward cache is stale (cache generation {cache}, params generation {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no valid `{0}` task instances in this world")]
    NoTasks(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Short stable identifier used in machine-parsable CLI and FFI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::DuplicateId(_) => "duplicate_id",
            Error::UnknownImage(_) => "unknown_image",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated(_) => "truncated",
            Error::NonFinite(_) => "non_finite",
            Error::ZeroNorm(_) => "zero_norm",
            Error::UnknownToken(_) => "unknown_token",
            Error::UnknownWord(_) => "unknown_word",
            Error::InvalidTemplate(_) => "invalid_template",
            Error::MissingSlot => "missing_slot",
            Error::InfeasibleCrop(_) => "infeasible_crop",
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::InfeasibleLayout(_) => "infeasible_layout",
            Error::BatchTooSmall { .. } => "batch_too_small",
            Error::NotNormalized { .. } => "not_normalized",
            Error::InvalidConfig(_) => "invalid_config",
            Error::StaleCache { .. } => "stale_cache",
            Error::TrainingAborted(_) => "training_aborted",
            Error::Empty(_) => "empty",
            Error::NoTasks(_) => "no_tasks",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
