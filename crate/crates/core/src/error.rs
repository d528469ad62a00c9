// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{what}: expected {expected} elements, found {actual}")]
    Shape {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("{what}: non-finite value at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid norm: {0}")]
    InvalidNorm(String),

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("token {token} at position {position} is out of range for vocabulary of size {vocab_size}")]
    TokenStream {
        position: usize,
        token: u32,
        vocab_size: usize,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed {what}: {detail}", path.display())]
    Format {
        path: PathBuf,
        what: String,
        detail: String,
    },

    #[error("dump field `{field}`: {detail}")]
    Dump { field: String, detail: String },

    #[error("dump invariant `{invariant}` violated: {detail}")]
    Invariant { invariant: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at layer {layer}, epoch {epoch}, step {step}: {detail}")]
    Divergence {
        layer: usize,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("missing label `{key}` on example {example}")]
    MissingLabel { key: String, example: usize },

    #[error("analysis: {0}")]
    Analysis(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, what: &str, detail: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            what: what.to_string(),
            detail: detail.to_string(),
        }
    }

    pub(crate) fn dump(field: &str, detail: impl ToString) -> Self {
        Error::Dump {
            field: field.to_string(),
            detail: detail.to_string(),
        }
    }

    /// True for failures of the numerical kind (divergence, non-finite
    /// intermediates) as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFinite { .. })
    }
}
