//! Prompt templates, the chat-completion client, response parsing and an
//! offline mock.

mod client;
mod kbr;
mod mock;
mod parse;
mod template;

use thiserror::Error;

pub use client::{
    completion_text, ChatMessage, ChatRequest, HttpTransport, LlmClient, LlmEndpointConfig, RetryingClient, Sleeper,
    ThreadSleeper, Transport,
};
pub use kbr::{format_properties, KbrEvaluator, DEFAULT_SIMILAR_K};
pub use mock::{kbr_json, refine_json, KeywordRule, MockLlm, MockPolicy};
pub use parse::{first_json_object, parse_kbr, parse_refine, KbrResponse, RefineResponse};
pub use template::{render, render_text, TemplateKind};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template placeholder `{0}` has no binding")]
    MissingPlaceholder(String),

    #[error("llm config: {0}")]
    Config(String),

    /// The variable holding the endpoint URL is unset.
    #[error("environment variable {0} is not set")]
    MissingEndpoint(String),

    #[error("llm request timed out")]
    Timeout,

    #[error("llm endpoint returned status {0}")]
    Status(u16),

    #[error("llm transport failure: {0}")]
    Transport(String),

    #[error("malformed llm response: {0}")]
    BadResponse(String),

    #[error("llm query failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<LlmError> },

    #[error("no JSON object in llm response")]
    NoJson,

    #[error("llm JSON has keys {found:?}, expected {expected:?}")]
    WrongKeys { expected: Vec<String>, found: Vec<String> },

    #[error("llm reward is not numeric: {0}")]
    NonNumeric(String),

    #[error("invalid feature selection: {0}")]
    BadSelection(String),

    #[error("mock llm has no rule matching the prompt")]
    NoMockRule,

    #[error("mock llm script of {0} responses is exhausted")]
    ScriptExhausted(usize),
}
