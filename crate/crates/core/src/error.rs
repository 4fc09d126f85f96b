//! Error types shared across the crate.

use thiserror::Error;

/// Errors surfaced by tensor operations, model construction, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        row: usize,
    },

    #[error("backward requires a scalar loss, got shape {got:?}")]
    NotScalar { got: Vec<usize> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("score requested before any backward pass: missing gradient for {what}")]
    MissingGrad { what: String },

    #[error("non-finite gradient encountered in {what}; aborting step {step}")]
    NonFiniteGrad { what: String, step: u64 },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("duplicate entry name in checkpoint: {0}")]
    DuplicateName(String),

    #[error("checkpoint does not match model config: {0}")]
    ConfigMismatch(String),

    #[error("missing checkpoint entry: {0}")]
    MissingEntry(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
