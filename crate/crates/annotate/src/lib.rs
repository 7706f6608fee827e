//! Human annotation collection: an append-only label store, agreement
//! analytics against model predictions, and the HTTP API used by annotators.

pub mod error;
pub mod http;
pub mod service;
pub mod store;

pub use error::{AnnotateError, Result};
pub use http::{router, serve};
pub use service::{AnnotationService, DistributionTable, LabelSubmission, NextTask, SystemAgreement};
pub use store::{AnnotationRecord, AnnotationStore};
