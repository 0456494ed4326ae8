use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, WamError>;

#[derive(Debug, Error)]
pub enum WamError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("attention query row {row} has no allowed key")]
    EmptyMaskRow { row: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("KV budget {budget} cannot hold {incoming} new tokens")]
    BudgetTooSmall { budget: usize, incoming: usize },

    #[error("KV pool inconsistent across layers: {0}")]
    PoolInconsistent(String),

    #[error("not a checkpoint (bad magic)")]
    NotACheckpoint,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Corrupted { stored: u64, computed: u64 },

    #[error("truncated or malformed data: {0}")]
    Parse(String),

    #[error("malformed clip {path}: {reason}")]
    MalformedClip { path: PathBuf, reason: String },

    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("horizon {requested_s}s exceeds available {available_s}s")]
    HorizonOverflow { requested_s: f64, available_s: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl WamError {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            WamError::Shape { .. } => "shape",
            WamError::EmptyMaskRow { .. } => "empty_mask_row",
            WamError::NonFinite(_) => "non_finite",
            WamError::InvalidArgument(_) => "invalid_argument",
            WamError::OutOfRange { .. } => "out_of_range",
            WamError::BudgetTooSmall { .. } => "budget_too_small",
            WamError::PoolInconsistent(_) => "pool_inconsistent",
            WamError::NotACheckpoint => "not_a_checkpoint",
            WamError::Version { .. } => "version",
            WamError::Corrupted { .. } => "corrupted",
            WamError::Parse(_) => "parse",
            WamError::MalformedClip { .. } => "malformed_clip",
            WamError::Diverged { .. } => "diverged",
            WamError::HorizonOverflow { .. } => "horizon_overflow",
            WamError::Io { .. } => "io",
            WamError::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WamError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        WamError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
