use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("image {height}x{width} is not divisible by the downsampling factor {factor}")]
    NotDivisible { height: usize, width: usize, factor: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("symbol {symbol} outside alphabet of {bits} bits")]
    SymbolOutOfRange { symbol: u32, bits: u8 },
    #[error("bias vector has {got} values, decoder expects {expected}")]
    BiasLayout { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Status codes of the arithmetic coder. The numeric values are the ones
/// reported across the flat-buffer boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CoderError {
    #[error("symbol {symbol} outside an alphabet of {alphabet} entries")]
    SymbolOutsideAlphabet { symbol: u32, alphabet: usize },
    #[error("malformed cdf table")]
    BadTable,
    #[error("symbol and table counts differ")]
    LengthMismatch,
    #[error("decoded symbols fail the checksum; the model or stream diverged")]
    ChecksumMismatch,
    #[error("stream ended before all symbols were decoded")]
    Truncated,
}

impl CoderError {
    pub fn status_code(&self) -> i32 {
        match self {
            CoderError::SymbolOutsideAlphabet { .. } => 1,
            CoderError::BadTable => 2,
            CoderError::LengthMismatch => 3,
            CoderError::ChecksumMismatch => 4,
            CoderError::Truncated => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("container truncated or length fields inconsistent")]
    Length,
    #[error("invalid header field: {0}")]
    Field(&'static str),
}

pub type Result<T, E = CodecError> = std::result::Result<T, E>;
