use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("exact action needs a signed permutation; use act_on_field_approx for general rotations")]
    UnsupportedExactAction,

    #[error("radial profile needs at least {needed} samples to cover radius {radius:.4}, got {got}")]
    InsufficientSamples { needed: usize, got: usize, radius: f64 },

    #[error("parameter shape: {0}")]
    ParameterShape(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("tape: {0}")]
    Tape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("constraint system has {columns} unknowns, above the limit of {limit}")]
    SizeGuard { columns: usize, limit: usize },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("config: {0}")]
    Config(String),

    #[error("build: {0}")]
    Build(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("duplicate blob name `{0}`")]
    DuplicateBlob(String),

    #[error("missing blob `{0}`")]
    MissingBlob(String),

    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),

    #[error("signature index {index} out of range for rank {rank} ({count} signatures)")]
    BadSignatureIndex { index: usize, rank: usize, count: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
