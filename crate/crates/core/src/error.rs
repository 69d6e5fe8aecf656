use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor extent did not match what the operation requires.
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    /// Wrong number of dimensions.
    Rank {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A scalar argument or configuration field is out of its domain.
    Invalid { field: &'static str, reason: String },
    /// `ratio * B^2 < 1`: not even one measurement per block.
    RatioTooSmall { ratio: f64, block_size: usize },
    /// Spatial extent that must be a multiple of the block size.
    NotBlockMultiple {
        axis: &'static str,
        size: usize,
        multiple: usize,
    },
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    /// The measurement operator has (numerically) zero spectral norm.
    DegenerateOperator,
    NonFiniteLoss { iteration: usize, loss: f64 },
    EpochOutOfRange { epoch: usize, epochs: usize },
    /// Measurement count of a matrix does not match the requested ratio.
    GeometryMismatch {
        ratio: f64,
        block_size: usize,
        expected: usize,
        actual: usize,
    },
    /// Learned reconstruction requested for a matrix without trained parameters.
    MissingReconstructor { matrix: String },
    EmptyDataset,
    /// Failure reported by a caller-supplied hook (checkpoint writer etc).
    Hook(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                op,
                axis,
                expected,
                actual,
            } => write!(
                f,
                "{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {actual}"
            ),
            Error::Rank {
                op,
                expected,
                actual,
            } => write!(f, "{op}: expected a {expected}-d tensor, got {actual}-d"),
            Error::Invalid { field, reason } => write!(f, "invalid `{field}`: {reason}"),
            Error::RatioTooSmall { ratio, block_size } => write!(
                f,
                "ratio too small for block size: {ratio} * {block_size}^2 < 1"
            ),
            Error::NotBlockMultiple {
                axis,
                size,
                multiple,
            } => write!(
                f,
                "{axis} = {size} is not a multiple of the block size; required multiple of {multiple}"
            ),
            Error::ImageTooSmall { height, width, min } => {
                write!(f, "image {height}x{width} is too small, need at least {min}x{min}")
            }
            Error::DegenerateOperator => {
                write!(f, "degenerate operator: measurement matrix has zero spectral norm")
            }
            Error::NonFiniteLoss { iteration, loss } => write!(
                f,
                "non-finite loss {loss} at iteration {iteration}; the learning rate is likely too high"
            ),
            Error::EpochOutOfRange { epoch, epochs } => {
                write!(f, "epoch {epoch} outside 1..={epochs}")
            }
            Error::GeometryMismatch {
                ratio,
                block_size,
                expected,
                actual,
            } => write!(
                f,
                "matrix geometry mismatch for ratio {ratio} and B={block_size}: expected n_b={expected}, got n_b={actual}"
            ),
            Error::MissingReconstructor { matrix } => write!(
                f,
                "matrix `{matrix}` has no trained reconstruction parameters (load it from a checkpoint)"
            ),
            Error::EmptyDataset => write!(f, "dataset contains no images"),
            Error::Hook(msg) => f.write_str(msg),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        field,
        reason: reason.into(),
    }
}
