//! Clinical note section segmentation.
//!
//! Sentence-labeled corpora and synthesized freetext notes are segmented by
//! rule-based matchers, a bag-of-words logistic regression classifier, or an
//! LLM behind [`llm`], and scored with token-level boundary metrics.

pub mod classifier;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod rules;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use model::{ClinicalNote, Label, LabelOntology, LabeledSentence, SectionSpan};
