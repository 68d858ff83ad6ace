//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite activation in record {record} (study {study_id}, position {position})")]
    NonFiniteActivation {
        record: usize,
        study_id: String,
        position: u32,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty shard")]
    EmptyShard,

    #[error("empty activation stream")]
    EmptyStream,

    #[error("duplicate record ({study_id}, {position})")]
    DuplicateRecord { study_id: String, position: u32 },

    #[error("token positions for study {0} are not a contiguous range starting at 0")]
    NonContiguousPositions(String),

    #[error("invalid shard file {path}: {reason}")]
    BadShard { path: PathBuf, reason: String },

    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("infeasible quota: {0}")]
    InfeasibleQuota(String),

    #[error("unknown group label {label:?} for study {study_id}")]
    UnknownGroup { study_id: String, label: String },

    #[error("need at least {need} studies, got {got}")]
    TooFewStudies { need: usize, got: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("feature index {index} out of range for dictionary of size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("missing score component: {0}")]
    MissingComponent(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("both profiles are all-zero")]
    BothZero,

    #[error("layer sets differ between models: {0}")]
    LayerMismatch(String),

    #[error("no causal delta row for feature {0}")]
    MissingRow(usize),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("misaligned streams: {0}")]
    Misaligned(String),

    #[error("hook layer {0} is not exposed by the generator")]
    HookLayerAbsent(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("schema validation failed for {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that come from numerical failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NonFinite(_) | Error::ZeroVector | Error::BothZero
        )
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFiniteActivation { .. } => "non_finite_activation",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyShard => "empty_shard",
            Error::EmptyStream => "empty_stream",
            Error::DuplicateRecord { .. } => "duplicate_record",
            Error::NonContiguousPositions(_) => "non_contiguous_positions",
            Error::BadShard { .. } => "bad_shard",
            Error::BadCheckpoint(_) => "bad_checkpoint",
            Error::InfeasibleQuota(_) => "infeasible_quota",
            Error::UnknownGroup { .. } => "unknown_group",
            Error::TooFewStudies { .. } => "too_few_studies",
            Error::Divergence { .. } => "divergence",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::MissingComponent(_) => "missing_component",
            Error::OutOfRange(_) => "out_of_range",
            Error::ZeroVector => "zero_vector",
            Error::BothZero => "both_zero",
            Error::LayerMismatch(_) => "layer_mismatch",
            Error::MissingRow(_) => "missing_row",
            Error::UnknownToken(_) => "unknown_token",
            Error::Misaligned(_) => "misaligned",
            Error::HookLayerAbsent(_) => "hook_layer_absent",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Oracle(_) => "oracle",
            Error::Schema { .. } => "schema",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
