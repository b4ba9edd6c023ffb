//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor kernels, layers, data ingestion, and training.
#[derive(Debug)]
pub enum Error {
    /// Two tensors that must agree in shape do not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single tensor has a shape an operation cannot accept.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    /// Convolution geometry does not produce a valid output extent.
    ConvGeometry {
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        pad: usize,
        reason: &'static str,
    },
    /// An index into a table or dataset is out of range.
    IndexOutOfRange { index: usize, len: usize },
    /// Generic argument validation failure.
    InvalidArgument(String),
    /// A loss or activation became NaN/Inf.
    NonFinite { context: String },
    /// An iterative solver hit its iteration cap.
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    /// Cholesky factorization found a non-positive-definite pivot.
    CholeskyFailed { pivot: usize },
    /// A backward pass was handed a cache from a different forward pass.
    StaleCache { expected: u64, found: u64 },
    /// Dataset parsing failure (IDX / PPM / raw).
    Data(DataError),
    /// Checkpoint serialization failure.
    Checkpoint(CheckpointError),
    /// Configuration file failure.
    Config(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

/// Structured parse errors for the dataset formats.
#[derive(Debug, PartialEq, Eq)]
pub enum DataError {
    IdxBadMagic { found: u32, expected: u32 },
    IdxDimOverflow,
    Truncated { context: &'static str },
    TrailingBytes { context: &'static str },
    PpmBadHeader { reason: &'static str },
    PpmUnsupportedMaxval { maxval: u32 },
    MixedShapes,
    UnsupportedImageSize { size: usize },
    EmptyDataset,
}

/// Structured errors for the GLO1 checkpoint format.
#[derive(Debug, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    CrcMismatch { stored: u32, computed: u32 },
    UnknownSection { kind: u8 },
    Truncated,
    Malformed { reason: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?}: {reason}")
            }
            Error::ConvGeometry {
                input,
                kernel,
                stride,
                pad,
                reason,
            } => write!(
                f,
                "conv geometry: input {input:?} kernel {kernel:?} stride {stride} pad {pad}: {reason}"
            ),
            Error::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::NotConverged {
                what,
                iterations,
                residual,
            } => write!(
                f,
                "{what} did not converge after {iterations} iterations (residual {residual:.3e})"
            ),
            Error::CholeskyFailed { pivot } => {
                write!(f, "cholesky failed at pivot {pivot}: matrix not positive definite")
            }
            Error::StaleCache { expected, found } => write!(
                f,
                "stale layer cache: parameters at version {found}, cache built at version {expected}"
            ),
            Error::Data(e) => write!(f, "data: {e}"),
            Error::Checkpoint(e) => write!(f, "checkpoint: {e}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::IdxBadMagic { found, expected } => {
                write!(f, "bad IDX magic {found:#010x}, expected {expected:#010x}")
            }
            DataError::IdxDimOverflow => write!(f, "IDX dimensions overflow"),
            DataError::Truncated { context } => write!(f, "truncated input while reading {context}"),
            DataError::TrailingBytes { context } => write!(f, "trailing bytes after {context}"),
            DataError::PpmBadHeader { reason } => write!(f, "bad PPM/PGM header: {reason}"),
            DataError::PpmUnsupportedMaxval { maxval } => {
                write!(f, "unsupported PPM/PGM maxval {maxval}, only 255 supported")
            }
            DataError::MixedShapes => write!(f, "images in directory have mixed sizes or formats"),
            DataError::UnsupportedImageSize { size } => {
                write!(f, "unsupported image size {size}, expected 28, 32 or 64")
            }
            DataError::EmptyDataset => write!(f, "no images found"),
        }
    }
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "bad magic, not a GLO1 checkpoint"),
            CheckpointError::VersionMismatch { found, expected } => {
                write!(f, "format version {found}, this build reads {expected}")
            }
            CheckpointError::CrcMismatch { stored, computed } => {
                write!(f, "CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")
            }
            CheckpointError::UnknownSection { kind } => write!(f, "unknown section kind {kind}"),
            CheckpointError::Truncated => write!(f, "truncated checkpoint"),
            CheckpointError::Malformed { reason } => write!(f, "malformed checkpoint: {reason}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<DataError> for Error {
    fn from(e: DataError) -> Self {
        Error::Data(e)
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Checkpoint(e)
    }
}
