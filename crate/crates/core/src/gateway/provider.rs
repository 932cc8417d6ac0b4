use serde::{Deserialize, Serialize};

use super::prompt::{RenderedPrompt, RoleId, Sampling};

/// Where a request came from in the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub candidate_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_name: Option<String>,
    pub round: u32,
    /// 1 for the first request, 2 for the single re-request after a
    /// malformed reply.
    pub attempt: u32,
}

impl RequestMeta {
    pub fn new(candidate_id: impl Into<String>, round: u32) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            function_name: None,
            round,
            attempt: 1,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.function_name = Some(name.into());
        self
    }

    pub fn attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub request_id: String,
    pub role: RoleId,
    pub model: String,
    pub prompt: RenderedPrompt,
    pub sampling: Sampling,
    pub meta: RequestMeta,
}

impl CompletionRequest {
    pub fn new(role: RoleId, model: impl Into<String>, prompt: RenderedPrompt, sampling: Sampling, meta: RequestMeta) -> Self {
        Self {
            request_id: format!("{role}:{}:{}:{}", meta.candidate_id, meta.round, meta.attempt),
            role,
            model: model.into(),
            prompt,
            sampling,
            meta,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub request_id: String,
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    /// HTTP status of the final attempt (200 for the mock).
    pub status: u16,
    /// Retries spent before the final attempt.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("provider failed after {attempts} attempts (last status {last_status:?}): {message}")]
    Exhausted {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("provider rejected the request with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed provider reply: {0}")]
    Malformed(String),
    #[error("no scripted response for {0}")]
    Unscripted(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

/// A chat-completion backend. Implementations must be safe to call from
/// several threads at once.
pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;
}
