use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocab { id: usize, vocab_size: usize },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{path}:{line}: label {label:?} is not 0 or 1")]
    Label {
        path: PathBuf,
        line: usize,
        label: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("teacher logit cache: {0}")]
    Cache(String),

    #[error("no teacher logits for {split} example {id}")]
    MissingLogits { split: String, id: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Label { .. }
                | Error::EmptyCorpus(_)
                | Error::Cache(_)
                | Error::MissingLogits { .. }
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Vocab { .. }
        )
    }

    /// True for numerical failures (NaN/Inf, divergence, failed gradient checks).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::GradCheck(_)
        )
    }
}
