//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range {bound} in {context}")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("extraction failed to reach density {target} within {steps} steps (reached {reached})")]
    Extraction {
        target: f64,
        reached: f64,
        steps: usize,
        trajectory: Vec<TrajectoryPoint>,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("file format error: {0}")]
    Format(String),

    #[error("registry hash mismatch: checkpoint {checkpoint}, mask {mask}")]
    RegistryMismatch { checkpoint: String, mask: String },

    #[error("missing prerequisites: {0:?}")]
    MissingArtifacts(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One logged point of a mask-training run, carried by extraction errors
/// and written to trajectory CSVs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub faithfulness: f64,
    pub sparseness: f64,
    pub lambda: f64,
    pub density: f64,
}

pub type Result<T> = std::result::Result<T, Error>;
