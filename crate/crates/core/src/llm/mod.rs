//! Model-agnostic bridge to API-hosted LLMs: prompt construction, transport
//! with caching and retries, and lenient response parsing.

pub mod client;
pub mod parse;
pub mod prompt;

pub use client::{
    call, call_many, request_hash, DecodingParams, HttpClient, LlmClient, LlmEndpoint, LlmTrace, MockBehavior,
    MockClient, MockReply, ResponseCache, SendError,
};
pub use parse::{parse_classification, parse_segmentation, ClassificationParse, ParseStatus, SegmentationParse};
pub use prompt::{build_prompt, PromptInput, TaskKind, TaskPrompt};
