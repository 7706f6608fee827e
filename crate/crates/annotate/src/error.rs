use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

pub type Result<T> = std::result::Result<T, AnnotateError>;

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("label {0:?} is not in the ontology")]
    InvalidLabel(String),

    #[error("unknown sentence {0:?}")]
    UnknownSentence(String),

    #[error("unknown system {0:?}")]
    UnknownSystem(String),

    #[error("unknown subset {0:?}")]
    UnknownSubset(String),

    #[error("no annotated sentence overlaps the predictions of {0}")]
    NoOverlap(String),

    #[error("annotator id is empty")]
    MissingAnnotator,

    #[error("task corpus is empty")]
    UnknownCorpus,

    #[error("{path}: corrupt log record at line {line}: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] cnseg_core::Error),
}

impl AnnotateError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AnnotateError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnnotateError::InvalidLabel(_) => "InvalidLabel",
            AnnotateError::UnknownSentence(_) => "UnknownSentence",
            AnnotateError::UnknownSystem(_) => "UnknownSystem",
            AnnotateError::UnknownSubset(_) => "UnknownSubset",
            AnnotateError::NoOverlap(_) => "NoOverlap",
            AnnotateError::MissingAnnotator => "MissingAnnotator",
            AnnotateError::UnknownCorpus => "UnknownCorpus",
            AnnotateError::CorruptLog { .. } => "CorruptLog",
            AnnotateError::Io { .. } => "IoError",
            AnnotateError::Core(_) => "Internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            AnnotateError::InvalidLabel(_) | AnnotateError::MissingAnnotator => StatusCode::BAD_REQUEST,
            AnnotateError::UnknownSentence(_)
            | AnnotateError::UnknownSystem(_)
            | AnnotateError::UnknownSubset(_)
            | AnnotateError::UnknownCorpus => StatusCode::NOT_FOUND,
            AnnotateError::NoOverlap(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for AnnotateError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({"error": self.kind(), "message": self.to_string()});
        (self.status(), Json(body)).into_response()
    }
}
