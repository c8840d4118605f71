use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth {depth} mm in camera frame")]
    BehindCamera { depth: f64 },

    #[error("need at least {required} views, got {got}")]
    InsufficientViews { required: usize, got: usize },

    #[error("degenerate view configuration: {reason}")]
    DegenerateConfiguration { reason: String },

    #[error("value out of range: {what}")]
    OutOfRange { what: String },

    #[error("image mask is empty")]
    EmptyMask,

    #[error("no points survived the pipeline: {stage}")]
    EmptyCloud { stage: String },

    #[error("empty input: {what}")]
    EmptyInput { what: String },

    #[error("mesh is empty after {op}")]
    EmptyMesh { op: String },

    #[error("degenerate mesh: {reason}")]
    DegenerateMesh { reason: String },

    #[error("invalid spec: {reason}")]
    InvalidSpec { reason: String },

    #[error("optimization diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("non-finite jacobian entries")]
    InvalidJacobian,

    #[error("invalid request: {reason}")]
    InvalidRequest { reason: String },

    #[error("format error in {path}: {reason} (byte offset {offset})")]
    Format {
        path: PathBuf,
        reason: String,
        offset: u64,
    },

    #[error("manifest schema error at `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: 2 for usage/format problems, 1 for domain errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } | Error::Schema { .. } | Error::InvalidRequest { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
