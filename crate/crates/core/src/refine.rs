//! Documentation pass over passing candidates, with mandatory
//! re-verification against the candidate's own suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gateway::{extract_code_block, Gateway, GatewayError, RequestMeta, RoleId};
use crate::improve::{restore_imports, Candidate, CandidateStatus, LoopState};
use crate::jsonl::JsonlLog;
use crate::orchestrator::{par_map, BatchJob, ExecutionResult, Orchestrator};
use crate::python::{self, FunctionShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedUnit {
    pub candidate_id: String,
    /// Module text: imports followed by the documented function.
    pub refined_source: String,
    pub docstring: String,
    pub verified: bool,
    /// False when this is the unrefined passing source admitted because
    /// `include_unrefined` is set.
    pub refined: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<ExecutionResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Provider,
    Unparseable,
    SignatureChanged,
    NoDocstring,
    BehaviorChanged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("refinement rejected ({reason:?}): {detail}")]
pub struct RefineRejection {
    pub candidate_id: String,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Serialize)]
struct AuditRecord<'a> {
    candidate_id: &'a str,
    pre_source: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    post_source: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verification: Option<&'a ExecutionResult>,
    decision: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<RejectReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<&'a str>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub passed: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
    pub unrefined_included: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineOutput {
    pub units: Vec<RefinedUnit>,
    pub rejections: Vec<RefineRejection>,
    pub report: RefineReport,
}

/// The source a passed candidate last passed with.
pub fn passing_source(c: &Candidate) -> Option<&str> {
    c.history
        .iter()
        .rev()
        .find(|h| h.result.is_pass())
        .map(|h| h.source.as_str())
}

fn find_function(source: &str, name: &str) -> Option<FunctionShape> {
    python::parse_module(source)
        .ok()?
        .iter()
        .filter_map(|s| FunctionShape::of(s, source))
        .find(|f| f.name == name)
}

pub struct Refiner<'a> {
    gateway: &'a Gateway,
    orchestrator: &'a Orchestrator,
    parallelism: usize,
    audit: Option<JsonlLog>,
}

impl<'a> Refiner<'a> {
    pub fn new(gateway: &'a Gateway, orchestrator: &'a Orchestrator) -> Self {
        Self {
            gateway,
            orchestrator,
            parallelism: orchestrator.policy().parallelism.max(1),
            audit: None,
        }
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn with_audit_log(mut self, log: JsonlLog) -> Self {
        self.audit = Some(log);
        self
    }

    /// Refine one passed candidate. `Err` is reserved for run-halting
    /// gateway errors; per-candidate problems are rejections.
    pub fn refine(&self, c: &Candidate) -> Result<Result<RefinedUnit, RefineRejection>, GatewayError> {
        assert_eq!(c.status, CandidateStatus::Passed, "only passed candidates are refined");
        let pre = passing_source(c).expect("passed candidates have a passing entry");
        let suite = &c.suite.as_ref().expect("passed candidates have a suite").source;
        let (outcome, post, verification) = self.attempt(c, pre, suite)?;
        if let Some(log) = &self.audit {
            let record = AuditRecord {
                candidate_id: &c.candidate_id,
                pre_source: pre,
                post_source: post.as_deref(),
                verification: verification.as_ref(),
                decision: if outcome.is_ok() { "accepted" } else { "rejected" },
                reason: outcome.as_ref().err().map(|r| r.reason),
                detail: outcome.as_ref().err().map(|r| r.detail.as_str()),
            };
            if let Err(e) = log.write(&record) {
                log::warn!("refine audit write failed: {e}");
            }
        }
        Ok(outcome)
    }

    #[allow(clippy::type_complexity)]
    fn attempt(
        &self,
        c: &Candidate,
        pre: &str,
        suite: &str,
    ) -> Result<(Result<RefinedUnit, RefineRejection>, Option<String>, Option<ExecutionResult>), GatewayError> {
        let reject = |reason, detail: String| RefineRejection {
            candidate_id: c.candidate_id.clone(),
            reason,
            detail,
        };
        let slots = BTreeMap::from([("function", pre), ("unit_test", suite)]);
        let meta = RequestMeta::new(&c.candidate_id, 0).named(&c.unit.name);
        let reply = match self.gateway.ask(RoleId::Refiner, &slots, meta) {
            Ok(r) => r,
            Err(GatewayError::Provider(e)) => return Ok((Err(reject(RejectReason::Provider, e.to_string())), None, None)),
            Err(e) => return Err(e),
        };
        let code = match extract_code_block(&reply.text) {
            Ok(b) => b.code,
            Err(e) => return Ok((Err(reject(RejectReason::Unparseable, e.to_string())), None, None)),
        };
        if let Err(e) = python::parse_module(&code) {
            return Ok((Err(reject(RejectReason::Unparseable, e.to_string())), Some(code), None));
        }
        let before = find_function(pre, &c.unit.name).expect("passing source defines the function");
        let Some(after) = find_function(&code, &c.unit.name) else {
            let detail = format!("no function named `{}` in the refined code", c.unit.name);
            return Ok((Err(reject(RejectReason::SignatureChanged, detail)), Some(code), None));
        };
        if after.params != before.params {
            let detail = format!("parameters ({}) became ({})", before.params.join(", "), after.params.join(", "));
            return Ok((Err(reject(RejectReason::SignatureChanged, detail)), Some(code), None));
        }
        let docstring = match &after.docstring {
            Some(d) if !d.text.trim().is_empty() => d.text.clone(),
            _ => return Ok((Err(reject(RejectReason::NoDocstring, String::new())), Some(code), None)),
        };
        let source = restore_imports(&c.unit.imports, &code);
        let result = self.orchestrator.execute(&BatchJob {
            candidate_id: c.candidate_id.clone(),
            round: c.round,
            function_source: source.clone(),
            test_source: suite.to_string(),
            measure_coverage: false,
        });
        if !result.is_pass() {
            let detail = crate::sandbox::to_wire_string(&result.verdict.result);
            return Ok((Err(reject(RejectReason::BehaviorChanged, detail)), Some(source), Some(result)));
        }
        let unit = RefinedUnit {
            candidate_id: c.candidate_id.clone(),
            refined_source: source.clone(),
            docstring,
            verified: true,
            refined: true,
            verification: Some(result.clone()),
        };
        Ok((Ok(unit), Some(source), Some(result)))
    }

    /// Refine every passed candidate in `state`, in candidate-id order.
    /// With `include_unrefined`, a rejected candidate whose passing source
    /// already carries a docstring is admitted unrefined.
    pub fn refine_all(&self, state: &LoopState, include_unrefined: bool) -> Result<RefineOutput, GatewayError> {
        let passed: Vec<&Candidate> = state.partition.d_pass.iter().map(|id| &state.candidates[id]).collect();
        let results = par_map(&passed, self.parallelism, |c| self.refine(c));
        let mut out = RefineOutput::default();
        out.report.passed = passed.len();
        for (c, r) in passed.iter().zip(results) {
            match r? {
                Ok(u) => {
                    out.report.accepted += 1;
                    out.units.push(u);
                }
                Err(rej) => {
                    *out.report.rejected.entry(rej.reason).or_default() += 1;
                    if include_unrefined {
                        if let Some(u) = unrefined(c) {
                            out.report.unrefined_included += 1;
                            out.units.push(u);
                        }
                    }
                    out.rejections.push(rej);
                }
            }
        }
        Ok(out)
    }
}

fn unrefined(c: &Candidate) -> Option<RefinedUnit> {
    let source = passing_source(c)?;
    let docstring = find_function(source, &c.unit.name)?.docstring?.text;
    if docstring.trim().is_empty() {
        return None;
    }
    Some(RefinedUnit {
        candidate_id: c.candidate_id.clone(),
        refined_source: source.to_string(),
        docstring,
        verified: true,
        refined: false,
        verification: c.history.iter().rev().find(|h| h.result.is_pass()).map(|h| h.result.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceDocument;
    use crate::extract::{extract_functions, ExtractOptions, ExtractStats};
    use crate::gateway::{MockProvider, ScriptEntry};
    use crate::improve::ImprovementLoop;
    use crate::orchestrator::{ExecutionPolicy, StubExecutor, StubRule};
    use crate::sandbox::Outcome;
    use std::sync::Arc;

    const GET_VAR: &str = "import numpy as np\n\ndef get_var(data):\n    m = np.mean(data)\n    return np.mean((np.array(data) - m) ** 2)\n";
    const GET_VAR_REFINED: &str = include_str!("../tests/fixtures/get_var_refined.py");
    const SUITE: &str = "```python\nimport unittest\nclass TestCases(unittest.TestCase):\n    def test_var(self):\n        self.assertEqual(get_var([1, 3]), 1.0)\n```";

    fn passed_state(refine_reply: &str, rules: Vec<StubRule>) -> (Gateway, Orchestrator, LoopState) {
        let doc = SourceDocument::new("m.py", GET_VAR);
        let units = extract_functions(&doc, &ExtractOptions::default(), &mut ExtractStats::default());
        let id = units[0].unit_id.clone();
        let gw = Gateway::single(Arc::new(MockProvider::new(vec![
            ScriptEntry::new(RoleId::TestGenerator, &id, 0, SUITE),
            ScriptEntry::new(RoleId::Refiner, &id, 0, refine_reply),
        ])));
        let orch = Orchestrator::new(
            Arc::new(StubExecutor::from_rules(rules)),
            ExecutionPolicy {
                flake_retries: 0,
                parallelism: 1,
                ..ExecutionPolicy::default()
            },
        );
        let state = ImprovementLoop::new(&gw, &orch, 0).run_to_completion(&units).unwrap();
        assert_eq!(state.partition.d_pass.len(), 1);
        (gw, orch, state)
    }

    fn pass_unless(marker: &str) -> Vec<StubRule> {
        vec![
            StubRule::when_function_contains(marker, vec![Outcome::fail([("test_var", "AssertionError: 2.0 != 1.0")])]),
            StubRule::when_function_contains("", vec![Outcome::Pass]),
        ]
    }

    #[test]
    fn documented_get_var_is_accepted() {
        let reply = format!("```python\n{GET_VAR_REFINED}```");
        let (gw, orch, state) = passed_state(&reply, pass_unless("NEVER"));
        let out = Refiner::new(&gw, &orch).refine_all(&state, false).unwrap();
        assert_eq!(out.report.accepted, 1);
        let u = &out.units[0];
        assert!(u.verified && u.refined);
        assert!(u.docstring.contains("Parameters:"));
        assert!(u.refined_source.starts_with("import numpy as np\n"));
        assert!(u.verification.as_ref().unwrap().is_pass());
    }

    #[test]
    fn renamed_function_is_rejected() {
        let reply = "```python\ndef variance(data):\n    \"\"\"Doc.\"\"\"\n    return 0\n```";
        let (gw, orch, state) = passed_state(reply, pass_unless("NEVER"));
        let out = Refiner::new(&gw, &orch).refine_all(&state, false).unwrap();
        assert_eq!(out.rejections[0].reason, RejectReason::SignatureChanged);
        assert!(out.units.is_empty());
        assert_eq!(out.report.passed, out.report.accepted + out.rejections.len());
    }

    #[test]
    fn changed_parameters_are_rejected() {
        let reply = "```python\ndef get_var(values, ddof=0):\n    \"\"\"Doc.\"\"\"\n    return 0\n```";
        let (gw, orch, state) = passed_state(reply, pass_unless("NEVER"));
        let out = Refiner::new(&gw, &orch).refine_all(&state, false).unwrap();
        assert_eq!(out.rejections[0].reason, RejectReason::SignatureChanged);
    }

    #[test]
    fn altered_behaviour_is_rejected() {
        let reply = "```python\ndef get_var(data):\n    \"\"\"Variance.\"\"\"\n    return 2.0  # BROKEN\n```";
        let (gw, orch, state) = passed_state(reply, pass_unless("BROKEN"));
        let out = Refiner::new(&gw, &orch).refine_all(&state, false).unwrap();
        assert_eq!(out.rejections[0].reason, RejectReason::BehaviorChanged);
        assert!(out.rejections[0].detail.contains("AssertionError"));
    }

    #[test]
    fn missing_docstring_is_rejected_and_unrefined_needs_one() {
        let reply = "```python\ndef get_var(data):\n    return 0\n```";
        let (gw, orch, state) = passed_state(reply, pass_unless("NEVER"));
        let out = Refiner::new(&gw, &orch).refine_all(&state, true).unwrap();
        assert_eq!(out.rejections[0].reason, RejectReason::NoDocstring);
        // The original has no docstring, so it cannot be admitted unrefined.
        assert_eq!(out.report.unrefined_included, 0);
    }

    #[test]
    fn audit_log_records_decisions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refine_audit.jsonl");
        let reply = "```python\ndef other(data):\n    return 0\n```";
        let (gw, orch, state) = passed_state(reply, pass_unless("NEVER"));
        Refiner::new(&gw, &orch)
            .with_audit_log(JsonlLog::append_to(&path).unwrap())
            .refine_all(&state, false)
            .unwrap();
        let rows: Vec<serde_json::Value> = crate::jsonl::read_records(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0]["decision"], "rejected");
        assert_eq!(rows[0]["reason"], "signature_changed");
    }
}
