//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension `{dim}` mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: spatial size {h}x{w} has an odd dimension; pad dataset images to a multiple of 16")]
    OddSpatial { op: &'static str, h: usize, w: usize },

    #[error("{op}: spatial size {h}x{w} is not a multiple of 16")]
    NotMultipleOf16 { op: &'static str, h: usize, w: usize },

    #[error("{op}: incompatible broadcast shapes {lhs} vs {rhs}")]
    BroadcastMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("tensor shape must have all dimensions >= 1, got {shape}")]
    EmptyDimension { shape: String },

    #[error("backward requires a scalar loss, got a tensor of {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("backward called twice on the same tape without reset")]
    DoubleBackward,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("parameter `{name}` has no gradient; run backward before the optimizer step")]
    MissingGradient { name: String },

    #[error("unknown parameter `{name}`")]
    UnknownParameter { name: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("residual path needs at least one block, got {0}")]
    NoBlocks(usize),

    #[error("epoch {t} outside the valid range [1, {x}]")]
    EpochOutOfRange { t: usize, x: usize },

    #[error("cannot exclude {n} of {y} samples; exclusion count must stay below the dataset size")]
    ExclusionTooLarge { n: usize, y: usize },

    #[error("all samples excluded; nothing left to train on")]
    AllExcluded,

    #[error("augmentation requires square images, got {h}x{w}")]
    NonSquare { h: usize, w: usize },

    #[error("mask dimensions differ: {h0}x{w0} vs {h1}x{w1}")]
    MaskDimMismatch {
        h0: usize,
        w0: usize,
        h1: usize,
        w1: usize,
    },

    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: &'static str,
    },

    #[error("noise proportion must lie in [0, 1], got {0}")]
    BadProportion(f64),

    #[error("pgm: bad magic `{found}` (expected P5)")]
    PgmBadMagic { found: String },

    #[error("pgm: ASCII (P2) files are not supported; convert to binary P5")]
    PgmAsciiUnsupported,

    #[error("pgm: malformed header: {0}")]
    PgmBadHeader(String),

    #[error("pgm: truncated payload (expected {expected} bytes, got {got})")]
    PgmTruncated { expected: usize, got: usize },

    #[error("checkpoint: bad magic (expected RARU)")]
    CheckpointBadMagic,

    #[error("checkpoint: unsupported version {0}")]
    CheckpointBadVersion(u32),

    #[error("checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint parameters do not match the stored config: {0}")]
    CheckpointShapeMismatch(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
