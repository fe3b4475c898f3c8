use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the tensor container reader.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("file shorter than the 8-byte header length prefix")]
    TruncatedPrefix,
    #[error("header length {declared} exceeds file size {available}")]
    HeaderOutOfBounds { declared: u64, available: u64 },
    #[error("header is not valid UTF-8")]
    HeaderNotUtf8,
    #[error("malformed header JSON: {0}")]
    HeaderJson(String),
    #[error("unsupported dtype tag {0:?}")]
    UnknownDtype(String),
    #[error("tensor {name:?}: offsets [{begin}, {end}) out of bounds for data section of {len} bytes")]
    OffsetOutOfBounds { name: String, begin: u64, end: u64, len: u64 },
    #[error("tensor {name:?}: byte range overlaps tensor {other:?}")]
    OverlappingOffsets { name: String, other: String },
    #[error("tensor {name:?}: byte length {bytes} does not match shape {shape:?} at {dtype}")]
    SizeMismatch { name: String, bytes: u64, shape: Vec<usize>, dtype: String },
    #[error("adapter key {0:?} has no matching lora_A/lora_B partner")]
    MissingPartner(String),
    #[error("adapter config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate batch: loss mask selects no positions")]
    DegenerateBatch,
    #[error("invalid density {0}: must lie in (0, 1]")]
    InvalidDensity(f64),
    #[error("merge error: {0}")]
    Merge(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
