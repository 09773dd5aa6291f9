use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not have the size an operation required.
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected a rank-{expected} tensor, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },

    /// Spatial size cannot be divided exactly by the stride.
    #[error("{op}: {dim} = {size} does not tile exactly with kernel {kernel}, stride {stride}, padding {padding}")]
    Geometry {
        op: &'static str,
        dim: &'static str,
        size: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint: {msg} at byte offset {offset}")]
    Checkpoint { offset: usize, msg: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("corpus {}: {msg}", path.display())]
    Corpus { path: PathBuf, msg: String },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
