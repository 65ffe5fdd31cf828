use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("segmenter failed to converge: validation accuracy {accuracy:.2}% below {required:.0}%")]
    Convergence { accuracy: f64, required: f64 },

    #[error("frozen network {0} was modified")]
    FrozenMutation(String),

    #[error("index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: u32, k: usize },

    #[error("{scheme} requires input `{input}`")]
    MissingInput { scheme: &'static str, input: &'static str },

    #[error("packet: {0}")]
    Packet(#[from] PacketError),

    #[error("transmission error: {0}")]
    Transmission(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures while parsing a wire packet. Decoding never yields a partial index map.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PacketError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported coder id {0}")]
    UnsupportedCoder(u8),
    #[error("truncated packet: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("code lengths violate the Kraft inequality")]
    KraftViolation,
    #[error("invalid code length {0}")]
    BadCodeLength(u8),
    #[error("{0} trailing bytes after packet body")]
    TrailingGarbage(usize),
    #[error("inconsistent header: {0}")]
    Inconsistent(String),
    #[error("undecodable bit pattern in body")]
    InvalidCode,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
