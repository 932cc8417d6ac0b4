//! Model access for the three agent roles: prompt rendering, providers
//! (HTTP and scripted mock), retries, rate limiting, budget accounting and
//! reply parsing.

mod http;
mod limiter;
mod mock;
mod parse;
mod prompt;
mod provider;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;

pub use http::{HttpProvider, HttpReply, ReqwestTransport, RetryPolicy, Transport};
pub use limiter::RateLimiter;
pub use mock::{MockProvider, ScriptEntry};
pub use parse::{
    extract_code_block, suite_from_reply, validate_test_suite, CodeBlock, EmptyResponse, RejectionReason,
    SuiteRejection, TEST_CLASS,
};
pub use prompt::{
    render_prompt, AgentRole, ProviderBinding, RenderedPrompt, RoleId, Sampling, TemplateError, DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE,
};
pub use provider::{CompletionRequest, CompletionResponse, Provider, ProviderError, RequestMeta, Usage};

use crate::jsonl::JsonlLog;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("budget exhausted: {0}")]
    Budget(String),
    #[error("no binding for role {0}")]
    UnboundRole(RoleId),
}

impl GatewayError {
    /// Budget exhaustion halts a run; every other error is per request.
    pub fn is_budget(&self) -> bool {
        matches!(self, Self::Budget(_))
    }
}

/// Caps on total spend across every role. `None` means unlimited.
#[derive(Debug, Default)]
pub struct Budget {
    pub max_requests: Option<u64>,
    pub max_tokens: Option<u64>,
    requests: AtomicU64,
    tokens: AtomicU64,
}

impl Budget {
    pub fn new(max_requests: Option<u64>, max_tokens: Option<u64>) -> Self {
        Self {
            max_requests,
            max_tokens,
            ..Self::default()
        }
    }

    fn reserve(&self) -> Result<(), GatewayError> {
        if let Some(max) = self.max_tokens {
            let used = self.tokens.load(Ordering::SeqCst);
            if used >= max {
                return Err(GatewayError::Budget(format!("{used} of {max} tokens used")));
            }
        }
        let n = self.requests.fetch_add(1, Ordering::SeqCst);
        if let Some(max) = self.max_requests {
            if n >= max {
                self.requests.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::Budget(format!("request limit {max} reached")));
            }
        }
        Ok(())
    }

    fn charge(&self, usage: Usage) {
        self.tokens.fetch_add(usage.total(), Ordering::SeqCst);
    }

    pub fn requests_used(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::SeqCst)
    }
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    request: &'a CompletionRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a CompletionResponse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Routes role requests to their bound providers.
pub struct Gateway {
    roles: BTreeMap<RoleId, AgentRole>,
    providers: HashMap<String, Arc<dyn Provider>>,
    limiter: Option<RateLimiter>,
    budget: Budget,
    audit: Option<JsonlLog>,
}

impl Gateway {
    pub fn new() -> Self {
        Self {
            roles: BTreeMap::new(),
            providers: HashMap::new(),
            limiter: None,
            budget: Budget::default(),
            audit: None,
        }
    }

    /// A gateway where every role uses the shipped prompts and `provider`.
    pub fn single(provider: Arc<dyn Provider>) -> Self {
        let mut gw = Self::new().with_provider("default", provider);
        for role in RoleId::ALL {
            gw = gw.with_role(AgentRole::with_defaults(
                role,
                ProviderBinding {
                    provider_id: "default".into(),
                    model: "default".into(),
                },
            ));
        }
        gw
    }

    pub fn with_provider(mut self, id: impl Into<String>, provider: Arc<dyn Provider>) -> Self {
        self.providers.insert(id.into(), provider);
        self
    }

    pub fn with_role(mut self, role: AgentRole) -> Self {
        self.roles.insert(role.role_id, role);
        self
    }

    pub fn with_limiter(mut self, limiter: RateLimiter) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_budget(mut self, budget: Budget) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_audit_log(mut self, log: JsonlLog) -> Self {
        self.audit = Some(log);
        self
    }

    pub fn role(&self, role: RoleId) -> Option<&AgentRole> {
        self.roles.get(&role)
    }

    pub fn budget(&self) -> &Budget {
        &self.budget
    }

    /// Render the role's prompt with `slots` and send it.
    pub fn ask(
        &self,
        role: RoleId,
        slots: &BTreeMap<&str, &str>,
        meta: RequestMeta,
    ) -> Result<CompletionResponse, GatewayError> {
        let binding = self.roles.get(&role).ok_or(GatewayError::UnboundRole(role))?;
        let prompt = render_prompt(binding, slots)?;
        let request = CompletionRequest::new(
            role,
            binding.provider.model.clone(),
            prompt,
            binding.sampling.clone(),
            meta,
        );
        self.complete(&request)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let binding = self
            .roles
            .get(&request.role)
            .ok_or(GatewayError::UnboundRole(request.role))?;
        let provider = self.providers.get(&binding.provider.provider_id).ok_or_else(|| {
            ProviderError::Config(format!("unknown provider `{}`", binding.provider.provider_id))
        })?;
        self.budget.reserve()?;
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let result = provider.complete(request);
        if let Ok(resp) = &result {
            self.budget.charge(resp.usage);
        }
        if let Some(log) = &self.audit {
            let record = AuditRecord {
                request,
                response: result.as_ref().ok(),
                error: result.as_ref().err().map(ToString::to_string),
            };
            if let Err(e) = log.write(&record) {
                log::warn!("audit log write failed: {e}");
            }
        }
        Ok(result?)
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}
