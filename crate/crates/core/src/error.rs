use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be >= 1 and rank <= 4")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid Hadamard order {0}: must be a power of two")]
    InvalidOrder(usize),

    #[error("residue {height}x{width} is not divisible by partition {partition}")]
    Partition {
        height: usize,
        width: usize,
        partition: usize,
    },

    #[error("invalid intra mode index {0}")]
    Mode(usize),

    #[error("block at ({x}, {y}) of size {size} lies outside the {width}x{height} image")]
    Bounds {
        x: usize,
        y: usize,
        size: usize,
        width: usize,
        height: usize,
    },

    #[error("image format error: {0}")]
    Format(String),

    #[error("image too small: {0}")]
    Size(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("model file integrity error: {0}")]
    Integrity(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Divergence { iteration: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
