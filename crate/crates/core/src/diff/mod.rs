//! Minimal reverse-mode differentiation over flat parameter vectors.

mod adam;
mod checkpoint;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use params::{ParamSlice, ParamVector};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar((usize, usize)),
    #[error("parameter slice {offset}..{} exceeds {n_params} parameters", offset + len)]
    ParamRange {
        offset: usize,
        len: usize,
        n_params: usize,
    },
    #[error("unknown parameter slice {0:?}")]
    UnknownSlice(String),
    #[error("duplicate parameter slice {0:?}")]
    DuplicateSlice(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;
