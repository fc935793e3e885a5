use std::path::PathBuf;

use thiserror::Error;

use crate::layout::SlotKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {0} lies outside [0, 1]")]
    InvalidCoordinate(f64),
    #[error("bin {bin} out of range for {bits}-bit quantization")]
    InvalidBin { bin: u32, bits: u32 },
    #[error("quantization precision must be in 1..=16 bits, got {0}")]
    InvalidBits(u32),
    #[error("category id {id} out of range for {count} categories")]
    InvalidCategory { id: u32, count: usize },
    #[error("duplicate category name {0:?}")]
    DuplicateCategory(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("layout has {n} elements, limit is {max}")]
    LayoutTooLong { n: usize, max: usize },
    #[error("malformed sequence at position {position}: expected {expected:?}, got token {got}")]
    MalformedSequence {
        position: usize,
        expected: SlotKind,
        got: u32,
    },
    #[error("sequence ends inside an element group at position {position}")]
    TruncatedElement { position: usize },
    #[error("vocabulary mismatch: {0}")]
    Vocab(String),
    #[error("sequence length {len} exceeds the model limit {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("vocabulary size {0} is too small for label smoothing")]
    InvalidVocab(usize),
    #[error("every position in the batch is masked")]
    EmptyBatch,
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: u64, message: String },
    #[error("incompatible checkpoint version {found} (expected {expected})")]
    IncompatibleCheckpoint { found: u32, expected: u32 },
    #[error("checkpoint integrity check failed: {0}")]
    Checksum(String),
    #[error("nucleus threshold must be in (0, 1], got {0}")]
    InvalidP(f64),
    #[error("no legal token has nonzero probability")]
    DegenerateDistribution,
    #[error("layout has no elements")]
    EmptyLayout,
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Tensor(#[from] slyt_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the failure came from the numerics rather than the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::DegenerateDistribution
                | Error::Tensor(slyt_tensor::TensorError::Numerical(_))
        )
    }
}
