use std::path::PathBuf;

use thiserror::Error;

use crate::trace::TensorId;

/// Problems found while reading or validating an execution trace.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate tensor id {id}")]
    DuplicateId { id: TensorId },
    #[error("tensor {id} has zero size")]
    ZeroSize { id: TensorId },
    #[error("step {step}: references unknown tensor id {id}")]
    DanglingTensor { step: usize, id: TensorId },
    #[error("step {step}: phase order violation ({message})")]
    PhaseOrder { step: usize, message: String },
    #[error("step {step}: {message}")]
    InvalidStep { step: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Errors surfaced by the simulator and its building blocks.
#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("out of memory: {needed} bytes needed, GPU capacity {capacity} bytes")]
    OutOfMemory { needed: u64, capacity: u64 },
    #[error("reference simulator supports at most {limit} tensors, trace has {actual}")]
    SizeGuardExceeded { limit: usize, actual: usize },
    #[error("unknown sweep axis `{0}`")]
    UnknownAxis(String),
    #[error("unknown link {0}")]
    UnknownLink(String),
    #[error("access to unplaced tensor {0}")]
    AccessToUnplacedTensor(TensorId),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0}")]
    Io(String),
}

impl From<crate::bufpool::PoolError> for SimError {
    fn from(e: crate::bufpool::PoolError) -> Self {
        SimError::Invariant(e.to_string())
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
