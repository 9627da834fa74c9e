use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("svd did not converge for {context} after {sweeps} sweeps (off-diagonal {residual:e})")]
    SvdNoConvergence {
        context: String,
        sweeps: usize,
        residual: f64,
    },

    #[error("{what} out of range: {value} not in [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: usize,
        lo: usize,
        hi: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty calibration batch")]
    EmptyBatch,

    #[error("missing calibration for quantization site `{0}`")]
    MissingCalibration(String),

    #[error("invalid bit setting `{0}`: expected W<w>A<a> with w, a in [2, 8]")]
    BitString(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("checkpoint is missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("incompatible reports: mismatched {}", .0.join(", "))]
    Incompatible(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
