use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operands with incompatible shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid user-supplied configuration (bad extents, bad ranges, bad keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation produced NaN or +/-Inf. Surfaced immediately rather than
    /// propagated; silent non-finite values make small-data debugging impossible.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// Audio file could not be decoded.
    #[error("decode error in {path}: {detail}")]
    Decode { path: String, detail: String },

    /// Manifest row failed validation.
    #[error("manifest error at row {row}: {detail}")]
    Manifest { row: usize, detail: String },

    /// Checkpoint or shard stream is malformed.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// API contract violation (caller bug, e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training stopped because of a non-finite loss or a failed step.
    #[error("training aborted at step {step} on batch {batch}: {detail}")]
    TrainAbort {
        step: usize,
        batch: usize,
        detail: String,
    },

    /// Evaluation could not produce a result (e.g. no class has positives).
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for user errors, 2 for internal ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Decode { .. }
            | Error::Manifest { .. }
            | Error::Format { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Eval(_) => 1,
            Error::ShapeMismatch { .. }
            | Error::NonFinite { .. }
            | Error::Contract(_)
            | Error::TrainAbort { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
