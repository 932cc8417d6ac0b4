//! Test-guided generation and repair.
//!
//! Phase 1 asks the test generator for a suite per unit and runs it once,
//! partitioning units into passed, pending repair and skipped. Phase 2 runs
//! bounded repair rounds with the bug-fix agent until nothing is pending or
//! `max_round` rounds have been spent.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::extract::{FunctionUnit, ImportStatement};
use crate::gateway::{extract_code_block, suite_from_reply, Gateway, GatewayError, RequestMeta, RoleId, SuiteRejection};
use crate::jsonl;
use crate::orchestrator::{par_map, BatchJob, ExecutionResult, Orchestrator};
use crate::python;
use crate::sandbox::{to_wire_string, ErrorKind, Status};

pub const DEFAULT_MAX_ROUND: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitTestSuite {
    pub suite_id: String,
    pub candidate_id: String,
    pub source: String,
    pub test_method_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    Passed,
    Exhausted,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    SuiteRejected,
    ImportMissing,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u32,
    pub source: String,
    pub result: ExecutionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub unit: FunctionUnit,
    /// Latest parseable module text (imports and function).
    pub current_source: String,
    pub suite: Option<UnitTestSuite>,
    pub round: u32,
    pub history: Vec<HistoryEntry>,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<Skip>,
}

impl Candidate {
    pub fn new(unit: FunctionUnit, suite: UnitTestSuite) -> Self {
        Self {
            candidate_id: unit.unit_id.clone(),
            current_source: unit.source(),
            unit,
            suite: Some(suite),
            round: 0,
            history: Vec::new(),
            status: CandidateStatus::Pending,
            skip: None,
        }
    }

    pub fn skipped(unit: FunctionUnit, reason: SkipReason, detail: impl Into<String>) -> Self {
        Self {
            candidate_id: unit.unit_id.clone(),
            current_source: unit.source(),
            unit,
            suite: None,
            round: 0,
            history: Vec::new(),
            status: CandidateStatus::Skipped,
            skip: Some(Skip {
                reason,
                detail: detail.into(),
            }),
        }
    }

    pub fn last_result(&self) -> Option<&ExecutionResult> {
        self.history.last().map(|h| &h.result)
    }

    /// Most recent verdict that came from an actual execution.
    fn last_executed(&self) -> Option<&ExecutionResult> {
        self.history
            .iter()
            .rev()
            .map(|h| &h.result)
            .find(|r| r.verdict.result.error_kind() != Some(ErrorKind::ProviderError))
    }

    fn job(&self, round: u32, source: &str) -> BatchJob {
        BatchJob {
            candidate_id: self.candidate_id.clone(),
            round,
            function_source: source.to_string(),
            test_source: self.suite.as_ref().map(|s| s.source.clone()).unwrap_or_default(),
            measure_coverage: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionState {
    pub d_pass: BTreeSet<String>,
    pub d_curr: BTreeSet<String>,
    pub d_skipped: BTreeSet<String>,
    pub round: u32,
}

impl PartitionState {
    pub fn admitted(&self) -> usize {
        self.d_pass.len() + self.d_curr.len() + self.d_skipped.len()
    }

    pub fn is_disjoint(&self) -> bool {
        self.d_pass.is_disjoint(&self.d_curr)
            && self.d_pass.is_disjoint(&self.d_skipped)
            && self.d_curr.is_disjoint(&self.d_skipped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub d_pass: usize,
    pub d_curr: usize,
    pub d_skipped: usize,
    pub newly_passed: usize,
}

/// Everything needed to continue a run: partition, candidates and per-round
/// bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub max_round: u32,
    pub partition: PartitionState,
    pub candidates: BTreeMap<String, Candidate>,
    pub rounds: Vec<RoundSummary>,
    pub finished: bool,
}

impl LoopState {
    /// Number of candidates that passed at each executed round.
    pub fn pass_counts(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.newly_passed).collect()
    }

    fn summarize(&mut self, newly_passed: usize) {
        let p = &self.partition;
        self.rounds.push(RoundSummary {
            round: p.round,
            d_pass: p.d_pass.len(),
            d_curr: p.d_curr.len(),
            d_skipped: p.d_skipped.len(),
            newly_passed,
        });
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut records = vec![CheckpointRecord::Header {
            max_round: self.max_round,
            partition: self.partition.clone(),
            rounds: self.rounds.clone(),
            finished: self.finished,
        }];
        records.extend(self.candidates.values().cloned().map(|c| CheckpointRecord::Candidate(Box::new(c))));
        jsonl::write_records(path, &records)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let invalid = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));
        let mut records = jsonl::read_records::<CheckpointRecord>(path)?.into_iter();
        let Some(CheckpointRecord::Header {
            max_round,
            partition,
            rounds,
            finished,
        }) = records.next()
        else {
            return Err(invalid("checkpoint does not start with a header"));
        };
        let mut candidates = BTreeMap::new();
        for r in records {
            match r {
                CheckpointRecord::Candidate(c) => {
                    candidates.insert(c.candidate_id.clone(), *c);
                }
                CheckpointRecord::Header { .. } => return Err(invalid("duplicate header")),
            }
        }
        Ok(Self {
            max_round,
            partition,
            candidates,
            rounds,
            finished,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum CheckpointRecord {
    Header {
        max_round: u32,
        partition: PartitionState,
        rounds: Vec<RoundSummary>,
        finished: bool,
    },
    Candidate(Box<Candidate>),
}

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    /// Budget exhaustion or a configuration problem in the gateway. The
    /// last checkpoint is intact.
    #[error("run halted: {0}")]
    Halted(#[source] GatewayError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] std::io::Error),
}

fn fatal(e: GatewayError) -> Result<(), LoopError> {
    match e {
        GatewayError::Provider(_) => Ok(()),
        other => Err(LoopError::Halted(other)),
    }
}

/// Prepend any of `original` that the revised text does not already contain.
pub(crate) fn restore_imports(original: &[ImportStatement], revised: &str) -> String {
    let present: BTreeSet<&str> = revised.lines().map(str::trim).collect();
    let missing: Vec<&str> = original
        .iter()
        .map(|i| i.text.as_str())
        .filter(|t| !present.contains(t))
        .collect();
    let mut out = String::new();
    for line in &missing {
        out.push_str(line);
        out.push('\n');
    }
    if !missing.is_empty() {
        out.push('\n');
    }
    out.push_str(revised.trim_end());
    out.push('\n');
    out
}

pub struct ImprovementLoop<'a> {
    gateway: &'a Gateway,
    orchestrator: &'a Orchestrator,
    max_round: u32,
    parallelism: usize,
    checkpoint: Option<PathBuf>,
}

impl<'a> ImprovementLoop<'a> {
    pub fn new(gateway: &'a Gateway, orchestrator: &'a Orchestrator, max_round: u32) -> Self {
        Self {
            gateway,
            orchestrator,
            max_round,
            parallelism: orchestrator.policy().parallelism.max(1),
            checkpoint: None,
        }
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    /// Write the loop state to `path` after initialization and every round.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    fn checkpoint(&self, state: &LoopState) -> Result<(), LoopError> {
        if let Some(path) = &self.checkpoint {
            state.save(path)?;
        }
        Ok(())
    }

    /// Request a suite for one unit, re-requesting once if the first reply
    /// is rejected.
    pub fn generate_suite(&self, unit: &FunctionUnit) -> Result<Candidate, LoopError> {
        let function = unit.source();
        let slots = BTreeMap::from([("function", function.as_str())]);
        let mut rejection: Option<SuiteRejection> = None;
        for attempt in 1..=2 {
            let meta = RequestMeta::new(&unit.unit_id, 0).named(&unit.name).attempt(attempt);
            let reply = match self.gateway.ask(RoleId::TestGenerator, &slots, meta) {
                Ok(r) => r,
                Err(e) => {
                    let detail = e.to_string();
                    fatal(e)?;
                    return Ok(Candidate::skipped(unit.clone(), SkipReason::Provider, detail));
                }
            };
            match suite_from_reply(&unit.unit_id, &reply.text) {
                Ok(suite) => return Ok(Candidate::new(unit.clone(), suite)),
                Err(r) => rejection = Some(r),
            }
        }
        let detail = rejection.map(|r| r.to_string()).unwrap_or_default();
        Ok(Candidate::skipped(unit.clone(), SkipReason::SuiteRejected, detail))
    }

    /// Generate suites for every unit not already in `done`. On a halt the
    /// candidates finished so far are returned alongside the error so the
    /// caller can persist them.
    pub fn generate_suites(
        &self,
        units: &[FunctionUnit],
        done: Vec<Candidate>,
    ) -> Result<Vec<Candidate>, (Vec<Candidate>, LoopError)> {
        let have: BTreeSet<String> = done.iter().map(|c| c.candidate_id.clone()).collect();
        let todo: Vec<&FunctionUnit> = units.iter().filter(|u| !have.contains(&u.unit_id)).collect();
        let results = par_map(&todo, self.parallelism, |u| self.generate_suite(u));
        let mut out = done;
        let mut halt = None;
        for r in results {
            match r {
                Ok(c) => out.push(c),
                Err(e) => halt = halt.or(Some(e)),
            }
        }
        // Keep input order so later stages do not depend on resume history.
        let order: BTreeMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.unit_id.as_str(), i)).collect();
        out.sort_by_key(|c| order.get(c.candidate_id.as_str()).copied().unwrap_or(usize::MAX));
        match halt {
            Some(e) => Err((out, e)),
            None => Ok(out),
        }
    }

    /// Run each candidate's original source against its suite and build the
    /// round-0 partition.
    pub fn initialize(&self, candidates: Vec<Candidate>) -> Result<LoopState, LoopError> {
        let jobs: Vec<BatchJob> = candidates
            .iter()
            .filter(|c| c.status == CandidateStatus::Pending)
            .map(|c| c.job(0, &c.current_source))
            .collect();
        let mut results: BTreeMap<String, ExecutionResult> = self
            .orchestrator
            .execute_batch(&jobs, self.parallelism)
            .into_iter()
            .map(|r| (r.candidate_id.clone(), r))
            .collect();

        let mut state = LoopState {
            max_round: self.max_round,
            partition: PartitionState::default(),
            candidates: BTreeMap::new(),
            rounds: Vec::new(),
            finished: false,
        };
        let mut passed = 0;
        for mut c in candidates {
            let id = c.candidate_id.clone();
            if c.status == CandidateStatus::Pending {
                let result = results.remove(&id).expect("one result per job");
                let status = result.status();
                let kind = result.verdict.result.error_kind();
                c.history.push(HistoryEntry {
                    round: 0,
                    source: c.current_source.clone(),
                    result,
                });
                if status == Status::Pass {
                    c.status = CandidateStatus::Passed;
                    passed += 1;
                } else if kind == Some(ErrorKind::ImportMissing) {
                    c.status = CandidateStatus::Skipped;
                    c.skip = Some(Skip {
                        reason: SkipReason::ImportMissing,
                        detail: c.last_result().map(|r| to_wire_string(&r.verdict.result)).unwrap_or_default(),
                    });
                }
            }
            let set = match c.status {
                CandidateStatus::Passed => &mut state.partition.d_pass,
                CandidateStatus::Skipped => &mut state.partition.d_skipped,
                CandidateStatus::Pending | CandidateStatus::Exhausted => &mut state.partition.d_curr,
            };
            set.insert(id.clone());
            state.candidates.insert(id, c);
        }
        state.summarize(passed);
        if self.max_round == 0 {
            self.finish(&mut state);
        }
        self.checkpoint(&state)?;
        Ok(state)
    }

    fn repair(&self, c: &Candidate, round: u32) -> Result<Candidate, LoopError> {
        let mut c = c.clone();
        let suite = c.suite.as_ref().expect("pending candidates have a suite").source.clone();
        let verdict = c
            .last_executed()
            .map(|r| to_wire_string(&r.verdict.result))
            .unwrap_or_default();
        let slots = BTreeMap::from([
            ("function", c.current_source.as_str()),
            ("unit_test", suite.as_str()),
            ("execution_result", verdict.as_str()),
        ]);
        let meta = RequestMeta::new(&c.candidate_id, round).named(&c.unit.name);
        let (source, result) = match self.gateway.ask(RoleId::BugFixer, &slots, meta) {
            Err(e) => {
                let detail = e.to_string();
                fatal(e)?;
                let r = ExecutionResult::synthetic(&c.candidate_id, round, ErrorKind::ProviderError, detail);
                (c.current_source.clone(), r)
            }
            Ok(reply) => match extract_code_block(&reply.text) {
                Err(e) => (
                    reply.text.clone(),
                    ExecutionResult::synthetic(&c.candidate_id, round, ErrorKind::ParseFailure, e.to_string()),
                ),
                Ok(block) => match python::parse_module(&block.code) {
                    Err(e) => (
                        block.code,
                        ExecutionResult::synthetic(&c.candidate_id, round, ErrorKind::ParseFailure, e.to_string()),
                    ),
                    Ok(_) => {
                        let source = restore_imports(&c.unit.imports, &block.code);
                        let result = self.orchestrator.execute(&c.job(round, &source));
                        c.current_source = source.clone();
                        (source, result)
                    }
                },
            },
        };
        if result.is_pass() {
            c.status = CandidateStatus::Passed;
        }
        c.round = round;
        c.history.push(HistoryEntry { round, source, result });
        Ok(c)
    }

    /// One repair round over every pending candidate. Nothing is committed
    /// unless the whole round completes.
    pub fn repair_round(&self, state: &mut LoopState) -> Result<(), LoopError> {
        assert!(state.partition.round < state.max_round, "no repair rounds left");
        let round = state.partition.round + 1;
        let pending: Vec<&Candidate> = state
            .partition
            .d_curr
            .iter()
            .map(|id| &state.candidates[id])
            .collect();
        let repaired = par_map(&pending, self.parallelism, |c| self.repair(c, round))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let mut passed = 0;
        for c in repaired {
            if c.status == CandidateStatus::Passed {
                state.partition.d_curr.remove(&c.candidate_id);
                state.partition.d_pass.insert(c.candidate_id.clone());
                passed += 1;
            }
            state.candidates.insert(c.candidate_id.clone(), c);
        }
        state.partition.round = round;
        state.summarize(passed);
        if state.partition.d_curr.is_empty() || round == state.max_round {
            self.finish(state);
        }
        self.checkpoint(state)
    }

    fn finish(&self, state: &mut LoopState) {
        for id in &state.partition.d_curr {
            if let Some(c) = state.candidates.get_mut(id) {
                c.status = CandidateStatus::Exhausted;
            }
        }
        state.finished = true;
    }

    /// Continue repair rounds from `state` (fresh or loaded from a
    /// checkpoint) until finished.
    pub fn resume(&self, mut state: LoopState) -> Result<LoopState, LoopError> {
        while !state.finished {
            if state.partition.d_curr.is_empty() || state.partition.round >= state.max_round {
                self.finish(&mut state);
                self.checkpoint(&state)?;
                break;
            }
            self.repair_round(&mut state)?;
        }
        Ok(state)
    }

    pub fn run_to_completion(&self, units: &[FunctionUnit]) -> Result<LoopState, LoopError> {
        let candidates = self.generate_suites(units, Vec::new()).map_err(|(_, e)| e)?;
        let state = self.initialize(candidates)?;
        self.resume(state)
    }
}

/// Replay every passed candidate's recorded passing source against its
/// suite. Returns the ids whose replay did not pass.
pub fn verify_membership(state: &LoopState, orchestrator: &Orchestrator) -> Vec<String> {
    state
        .partition
        .d_pass
        .iter()
        .filter(|id| {
            let c = &state.candidates[*id];
            let Some(entry) = c.history.iter().rev().find(|h| h.result.is_pass()) else {
                return true;
            };
            !orchestrator.execute(&c.job(entry.round, &entry.source)).is_pass()
        })
        .cloned()
        .collect()
}
