//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("gradient tape already consumed")]
    TapeConsumed,

    #[error("forward pass was not recorded; no tape available")]
    NotRecorded,

    #[error("invalid layer chain: {0}")]
    InvalidLayer(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid target distribution: {0}")]
    InvalidTarget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty exit set")]
    EmptyExitSet,

    #[error("empty scope: attack requires at least one sample")]
    EmptyScope,

    #[error("empty record list")]
    EmptyRecords,

    #[error("empty holdout set")]
    EmptyHoldout,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("budget norm mismatch: attack requires {expected}, got {found}")]
    BudgetMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("attack requires a calibrated policy to define success")]
    PolicyRequired,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid partition scenario: {0}")]
    InvalidScenario(String),

    #[error("bad magic bytes: not a {0} file")]
    BadMagic(&'static str),

    #[error("unsupported {kind} format version {version}")]
    UnsupportedVersion { kind: &'static str, version: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch: file corrupted")]
    ChecksumMismatch,

    #[error("cost model missing entries: {0}")]
    MissingCost(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("descriptor parse error: {0}")]
    Descriptor(#[from] serde_json::Error),
}
