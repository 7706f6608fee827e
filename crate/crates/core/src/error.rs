use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("char offset {offset} out of range for text of length {len}")]
    OffsetOutOfRange { offset: usize, len: usize },

    #[error("malformed record at line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("invalid ontology: {0}")]
    InvalidOntology(String),

    #[error("alias {alias:?} is claimed by both {first} and {second}")]
    DuplicateAlias {
        alias: String,
        first: String,
        second: String,
    },

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("need at least {needed} notes for the split, got {got}")]
    TooFewNotes { needed: usize, got: usize },

    #[error("training fold has a single label ({0}); need at least two")]
    DegenerateFold(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("boundary sets belong to different notes: {0} vs {1}")]
    NoteMismatch(String, String),

    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),

    #[error("within-group variance is zero")]
    DegenerateVariance,

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("auth token missing: environment variable {0} is not set")]
    AuthMissing(String),

    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a human readable context such as `logreg/fold 3`.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
