//! OpenAI-style chat-completion provider with retry and backoff.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::provider::{CompletionRequest, CompletionResponse, Provider, ProviderError, Usage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. Transport-level failures (connection refused,
/// timeouts) are returned as `Err` and retried like a 5xx.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, String> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base * 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || status == 408 || (500..600).contains(&status)
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct HttpProvider<T> {
    transport: T,
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    sleep: Sleeper,
}

impl<T: Transport> HttpProvider<T> {
    pub fn new(transport: T, base_url: &str, api_key: Option<String>, retry: RetryPolicy) -> Self {
        Self {
            transport,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            retry,
            sleep: Arc::new(std::thread::sleep),
        }
    }

    /// Replace the backoff sleep, e.g. to record delays in tests.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    fn body(request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.prompt.system},
                {"role": "user", "content": request.prompt.user},
            ],
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
        });
        if let Some(seed) = request.sampling.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn parse_reply(body: &str) -> Result<(String, Usage), ProviderError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))?;
    let count = |p: &str| v.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    Ok((
        text.to_string(),
        Usage {
            prompt_tokens: count("/usage/prompt_tokens"),
            completion_tokens: count("/usage/completion_tokens"),
        },
    ))
}

impl<T: Transport> Provider for HttpProvider<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let body = Self::body(request);
        let started = Instant::now();
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                (self.sleep)(self.retry.delay(attempt - 1));
            }
            match self.transport.post_json(&self.endpoint, self.api_key.as_deref(), &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let (text, usage) = parse_reply(&reply.body)?;
                    return Ok(CompletionResponse {
                        request_id: request.request_id.clone(),
                        text,
                        usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                        status: reply.status,
                        retries: attempt,
                    });
                }
                Ok(reply) if retryable(reply.status) => {
                    log::warn!("{}: status {}, retrying", request.request_id, reply.status);
                    last_status = Some(reply.status);
                    last_message = reply.body;
                }
                Ok(reply) => {
                    return Err(ProviderError::Rejected {
                        status: reply.status,
                        message: reply.body,
                    })
                }
                Err(e) => {
                    log::warn!("{}: transport error {e}, retrying", request.request_id);
                    last_message = e;
                }
            }
        }
        Err(ProviderError::Exhausted {
            attempts: self.retry.max_retries + 1,
            last_status,
            message: last_message,
        })
    }
}
