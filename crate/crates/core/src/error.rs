use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: field `{field}`: {message}")]
    Record {
        line: usize,
        field: String,
        message: String,
    },

    #[error("degenerate box {0:?}: requires x1 < x2, y1 < y2, finite coordinates in [0,1]")]
    DegenerateBox([f64; 4]),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("duplicate membership: attribute `{attribute}` listed in `{first}` and `{second}`")]
    DuplicateMembership {
        attribute: String,
        first: String,
        second: String,
    },

    #[error("uncovered attribute `{0}`: not assigned to any group")]
    UncoveredAttribute(String),

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at stage {stage}, epoch {epoch}, step {step}: {component} = {value}")]
    Diverged {
        stage: u8,
        epoch: usize,
        step: usize,
        component: String,
        value: f64,
    },

    #[error("corrupt checkpoint at byte offset {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("missing metric row for attribute `{0}`")]
    MissingRow(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
