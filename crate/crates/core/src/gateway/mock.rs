//! Scripted provider for deterministic runs.
//!
//! A script is line-delimited JSON, one response per line:
//!
//! ```text
//! {"role": "test_generator", "candidate": "<candidate id>", "round": 0, "attempt": 1, "response": "```python\n...\n```"}
//! ```
//!
//! `round` defaults to 0 and `attempt` to 1. `candidate` is either a
//! candidate id or `name:<function name>`; an entry keyed by id wins over
//! one keyed by name. A request with no matching entry is an error and is
//! recorded in [`MockProvider::misses`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::prompt::RoleId;
use super::provider::{CompletionRequest, CompletionResponse, Provider, ProviderError, Usage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub role: RoleId,
    pub candidate: String,
    #[serde(default)]
    pub round: u32,
    #[serde(default = "first_attempt")]
    pub attempt: u32,
    pub response: String,
}

fn first_attempt() -> u32 {
    1
}

impl ScriptEntry {
    pub fn new(role: RoleId, candidate: impl Into<String>, round: u32, response: impl Into<String>) -> Self {
        Self {
            role,
            candidate: candidate.into(),
            round,
            attempt: 1,
            response: response.into(),
        }
    }

    pub fn on_attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }
}

type Key = (RoleId, String, u32, u32);

#[derive(Debug, Default)]
pub struct MockProvider {
    responses: HashMap<Key, String>,
    misses: Mutex<Vec<String>>,
}

impl MockProvider {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let responses = entries
            .into_iter()
            .map(|e| ((e.role, e.candidate, e.round, e.attempt), e.response))
            .collect();
        Self {
            responses,
            misses: Mutex::new(Vec::new()),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(crate::jsonl::read_records::<ScriptEntry>(path)?))
    }

    /// Request ids that found no scripted response.
    pub fn misses(&self) -> Vec<String> {
        self.misses.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn lookup(&self, request: &CompletionRequest) -> Option<&String> {
        let m = &request.meta;
        let by_id = (request.role, m.candidate_id.clone(), m.round, m.attempt);
        self.responses.get(&by_id).or_else(|| {
            let name = m.function_name.as_ref()?;
            self.responses
                .get(&(request.role, format!("name:{name}"), m.round, m.attempt))
        })
    }
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl Provider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        match self.lookup(request) {
            Some(text) => Ok(CompletionResponse {
                request_id: request.request_id.clone(),
                text: text.clone(),
                usage: Usage {
                    prompt_tokens: word_count(&request.prompt.system) + word_count(&request.prompt.user),
                    completion_tokens: word_count(text),
                },
                latency_ms: 0,
                status: 200,
                retries: 0,
            }),
            None => {
                self.misses
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .push(request.request_id.clone());
                Err(ProviderError::Unscripted(request.request_id.clone()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::prompt::{RenderedPrompt, Sampling};
    use crate::gateway::provider::RequestMeta;

    fn request(candidate: &str, name: Option<&str>) -> CompletionRequest {
        let mut meta = RequestMeta::new(candidate, 0);
        meta.function_name = name.map(str::to_string);
        CompletionRequest::new(
            RoleId::TestGenerator,
            "m",
            RenderedPrompt {
                system: "s".into(),
                user: "u v".into(),
            },
            Sampling::default(),
            meta,
        )
    }

    #[test]
    fn scripted_text_is_returned() {
        let mock = MockProvider::new([ScriptEntry::new(RoleId::TestGenerator, "c1", 0, "fixed text")]);
        let r = mock.complete(&request("c1", None)).unwrap();
        assert_eq!(r.text, "fixed text");
        assert_eq!(r.usage.prompt_tokens, 3);
        assert_eq!(r.usage.completion_tokens, 2);
    }

    #[test]
    fn unmatched_lookup_is_an_error() {
        let mock = MockProvider::new([]);
        assert!(matches!(mock.complete(&request("c1", None)), Err(ProviderError::Unscripted(_))));
        assert_eq!(mock.misses(), vec!["test_generator:c1:0:1".to_string()]);
    }

    #[test]
    fn id_entry_beats_name_entry() {
        let mock = MockProvider::new([
            ScriptEntry::new(RoleId::TestGenerator, "name:f", 0, "by name"),
            ScriptEntry::new(RoleId::TestGenerator, "c1", 0, "by id"),
        ]);
        assert_eq!(mock.complete(&request("c1", Some("f"))).unwrap().text, "by id");
        assert_eq!(mock.complete(&request("c2", Some("f"))).unwrap().text, "by name");
    }

    #[test]
    fn script_file_defaults() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), r#"{"role": "refiner", "candidate": "c", "response": "x"}"#).unwrap();
        let mock = MockProvider::load(f.path()).unwrap();
        assert_eq!(mock.responses.len(), 1);
        assert!(mock.responses.contains_key(&(RoleId::Refiner, "c".to_string(), 0, 1)));
    }
}
