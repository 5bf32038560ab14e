use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SlaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SlaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid block layout: {0}")]
    Layout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value {value} at ({row}, {col})")]
    NonFiniteInput { row: usize, col: usize, value: f64 },

    #[error("non-finite intermediate in {stage} at row {row}, block row {block_row}, block column {block_col:?}")]
    NonFinite {
        stage: &'static str,
        row: usize,
        block_row: usize,
        block_col: Option<usize>,
    },

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("zero matrix has no stable rank")]
    ZeroMatrix,

    #[error("training diverged at step {step}: loss {loss:.6e} exceeds 10x initial loss {initial:.6e}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("tensor file {path}: {message}")]
    TensorFile { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
