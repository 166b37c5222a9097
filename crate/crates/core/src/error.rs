use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("sample of {got} items is too small, need at least {needed}")]
    InsufficientSample { needed: usize, got: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("image has no descriptors")]
    EmptyImage,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("fusion input `{id}` is not unit-norm (norm {norm:.6}); rescale the distances or L2-normalize the vectors first")]
    NotUnitNorm { id: String, norm: f64 },

    #[error("query `{0}` has no positives in the ground truth")]
    NoPositives(String),

    #[error("query `{0}` has no ranked list")]
    MissingRanking(String),

    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    #[error("{}: byte offset {offset}: expected {expected}", file.display())]
    Parse {
        file: PathBuf,
        offset: u64,
        expected: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[inline]
pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
