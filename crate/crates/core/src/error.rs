//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("patch size {patch} does not divide extent {extent} on {axis} axis")]
    Patching {
        axis: &'static str,
        extent: usize,
        patch: usize,
    },

    #[error("patch coverage: {0}")]
    Coverage(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("{block} block has width {found}, expected d_model {expected}")]
    Packing {
        block: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("missing parameter bank for modality {0}")]
    Routing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("non-finite values in {stage} at step {step}")]
    Divergence { stage: String, step: usize },

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: String, expected: String },

    #[error("checkpoint truncated: header promises {needed} body bytes, found {got}")]
    CheckpointTruncated { needed: usize, got: usize },

    #[error("checkpoint array {name}: shape {got:?} does not match expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
