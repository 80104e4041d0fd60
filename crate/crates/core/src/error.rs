// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, UnpackError>;

#[derive(Debug, Error)]
pub enum UnpackError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}` in manifest")]
    UnexpectedTensor(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported {what} `{value}` for tensor `{name}`")]
    Unsupported {
        name: String,
        what: &'static str,
        value: String,
    },

    #[error("tensor `{name}` lies outside weights blob or is misaligned (offset {offset})")]
    BadOffset { name: String, offset: u64 },

    #[error("checksum mismatch for weights blob: manifest {expected}, computed {found}")]
    Checksum { expected: String, found: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("empty input sequence")]
    EmptyInput,

    #[error("sequence of length {len} exceeds positional table of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("capture is missing `{0}`; rerun forward with that capture flag")]
    MissingCapture(&'static str),

    #[error("invalid trace config: {0}")]
    TraceConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("fixture error: {0}")]
    Fixture(String),
}

impl UnpackError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 model, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. }
            | Self::Manifest(_)
            | Self::MissingTensor(_)
            | Self::UnexpectedTensor(_)
            | Self::ShapeMismatch { .. }
            | Self::Unsupported { .. }
            | Self::BadOffset { .. }
            | Self::Checksum { .. }
            | Self::Config(_)
            | Self::Tokenizer(_) => 3,
            Self::Numeric(_) => 4,
            _ => 2,
        }
    }
}
