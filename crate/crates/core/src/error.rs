use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid pattern: {0}")]
    Pattern(String),

    #[error("rank {rank} out of range for {shape} (config count {count})")]
    RankOutOfRange {
        rank: u128,
        count: u128,
        shape: String,
    },

    #[error("binomial C({n}, {k}) does not fit in 128 bits")]
    Overflow { n: usize, k: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised while parsing `DWT1` / `NMS1` byte streams.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("truncated {context}: need {needed} bytes, {available} available")]
    Truncated {
        context: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("invalid rank {rank} at row {row}, block {block} (must be < {limit})")]
    InvalidRank {
        row: usize,
        block: usize,
        rank: u128,
        limit: u128,
    },

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("non-finite value in payload at index {0}")]
    NonFinite(usize),
}
