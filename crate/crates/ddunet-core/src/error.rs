use std::path::PathBuf;

/// Error type shared across the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was configured inconsistently (bad groups, wrong input
    /// size, invalid hyperparameter, checkpoint/config disagreement).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An API contract was violated (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Batch statistics are undefined: normalization over a single value.
    #[error("degenerate batch: batch*height*width == 1 in train mode")]
    DegenerateBatch,

    /// Input data is malformed (labels outside {0,1}, non-binary masks, ...).
    #[error("bad data: {0}")]
    Data(String),

    /// Dataset directory problems: missing masks, empty dataset.
    #[error("dataset index: {0}")]
    Index(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// Training diverged; carries the diagnostics the trainer collected.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

/// Checkpoint decoding failures, one variant per distinct corruption mode.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"DDUN\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("payload checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor name mismatch at entry {index}: expected {expected}, found {found}")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("checkpoint holds {found} tensors, model expects {expected}")]
    EntryCount { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub(crate) fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
