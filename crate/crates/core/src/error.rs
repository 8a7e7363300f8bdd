use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Length { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token id {id} is outside a vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),

    #[error("sequence length {len} exceeds the context window of {max}")]
    Context { len: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (lr {lr:e})")]
    NonFiniteLoss { step: usize, lr: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("batch fingerprint mismatch: {0:016x} vs {1:016x}")]
    Fingerprint(u64, u64),

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated checkpoint: payload needs {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },

    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),

    #[error("bad checkpoint header: {0}")]
    Header(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
