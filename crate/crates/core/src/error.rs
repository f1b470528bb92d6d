use thiserror::Error;

/// Failures of the container file format. Each variant is a distinct category
/// so callers can tell a foreign file from a damaged one.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"YLDH\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated inside the header")]
    TruncatedHeader,
    #[error("file truncated inside sample {sample}")]
    Truncated { sample: usize },
    #[error("file truncated inside tensor record {record}")]
    TruncatedRecord { record: usize },
    #[error("unexpected record type {found}, expected {expected}")]
    RecordType { found: u8, expected: &'static str },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("output is detached: it does not depend on any gradient-tracked leaf of this graph")]
    Detached,
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("targets are degenerate (zero total sum of squares); R² is undefined")]
    DegenerateTargets,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
