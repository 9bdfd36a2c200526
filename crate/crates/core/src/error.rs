use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input that admits no meaningful answer, e.g. the cosine of a zero vector.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed image, manifest or dataset content.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures while decoding or encoding a tensor container file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"LGTW\"")]
    BadMagic([u8; 4]),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },

    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor name is not valid UTF-8")]
    InvalidName,

    #[error("tensor name too long ({0} bytes)")]
    NameTooLong(usize),

    #[error("tensor `{name}` has unsupported rank {rank}")]
    InvalidRank { name: String, rank: u8 },

    #[error("tensor `{0}` has a zero-length axis")]
    ZeroDim(String),

    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
