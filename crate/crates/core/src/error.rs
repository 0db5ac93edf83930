use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line count mismatch: source has {source_lines} lines, target has {target_lines}")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocabulary cap {0} is too small, the four reserved tokens need at least 5 slots")]
    VocabCapTooSmall(usize),

    #[error("unknown sentence id {0}")]
    UnknownId(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),

    #[error("non-finite loss at {0}")]
    NonFinite(String),

    #[error("training diverged in epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("forward record is stale: parameters changed since the forward pass")]
    StaleRecord,

    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid negative log-likelihood {0} (must be finite and >= 0)")]
    InvalidNll(f64),

    #[error("empty source sentence")]
    EmptySource,

    #[error("length mismatch: {hypotheses} hypotheses vs {references} references")]
    LengthMismatch {
        hypotheses: usize,
        references: usize,
    },

    #[error("vocabulary mismatch on the {side} side: {detail}")]
    VocabMismatch { side: &'static str, detail: String },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Output {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::LineCountMismatch { .. }
                | Error::EmptyCorpus
                | Error::VocabCapTooSmall(_)
                | Error::Config(_)
                | Error::UnknownConfigKey(_)
                | Error::VocabMismatch { .. }
                | Error::LengthMismatch { .. }
        )
    }
}
