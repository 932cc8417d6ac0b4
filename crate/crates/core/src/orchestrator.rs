//! Dispatch of (function, test suite) pairs to sandbox workers.
//!
//! [`Executor`] is the seam between the pipeline and whatever runs the code:
//! [`ProcessExecutor`] spawns one worker process per job and speaks the
//! protocol in [`crate::sandbox`]; [`StubExecutor`] answers from a table of
//! scripted verdicts so the pipeline can run without an interpreter.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::hash::sha256_hex;
use crate::jsonl::JsonlLog;
use crate::sandbox::{ErrorKind, Outcome, RunnerJob, Status, Verdict, WorkerResponse};

pub const DEFAULT_TIMEOUT_SECONDS: f64 = 30.0;
pub const DEFAULT_GRACE_SECONDS: f64 = 5.0;

pub trait Executor: Send + Sync {
    /// Run one job. Failures of the worker itself are reported as error
    /// verdicts, never as panics.
    fn run(&self, job: &RunnerJob) -> Verdict;
}

impl<E: Executor + ?Sized> Executor for Arc<E> {
    fn run(&self, job: &RunnerJob) -> Verdict {
        (**self).run(job)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPolicy {
    pub timeout_seconds: f64,
    /// Extra attempts after a `fail` verdict.
    pub flake_retries: u32,
    /// Extra attempts after an `error` verdict.
    pub error_retries: u32,
    pub parallelism: usize,
}

impl Default for ExecutionPolicy {
    fn default() -> Self {
        Self {
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            flake_retries: 1,
            error_retries: 0,
            parallelism: default_parallelism(),
        }
    }
}

pub fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Outcome of executing one candidate's current source against its suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub candidate_id: String,
    pub round: u32,
    #[serde(flatten)]
    pub verdict: Verdict,
    /// Number of executions performed; greater than 1 only after a retry.
    pub attempt: u32,
}

impl ExecutionResult {
    pub fn status(&self) -> Status {
        self.verdict.result.status()
    }

    pub fn is_pass(&self) -> bool {
        self.verdict.result.is_pass()
    }

    /// Result that was never executed (parse failure, provider error).
    pub fn synthetic(candidate_id: &str, round: u32, kind: ErrorKind, detail: impl Into<String>) -> Self {
        Self {
            candidate_id: candidate_id.to_string(),
            round,
            verdict: Verdict::new(Outcome::error(kind, detail)),
            attempt: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchJob {
    pub candidate_id: String,
    pub round: u32,
    pub function_source: String,
    pub test_source: String,
    pub measure_coverage: bool,
}

pub struct Orchestrator {
    executor: Arc<dyn Executor>,
    policy: ExecutionPolicy,
    log: Option<JsonlLog>,
}

impl Orchestrator {
    pub fn new(executor: Arc<dyn Executor>, policy: ExecutionPolicy) -> Self {
        Self {
            executor,
            policy,
            log: None,
        }
    }

    pub fn with_log(mut self, log: JsonlLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn policy(&self) -> &ExecutionPolicy {
        &self.policy
    }

    /// Run one pair, re-running `fail` verdicts up to `flake_retries` times
    /// (and `error` verdicts up to `error_retries` times). Reports pass iff
    /// any attempt passed.
    pub fn execute(&self, job: &BatchJob) -> ExecutionResult {
        let mut attempt = 0;
        let verdict = loop {
            attempt += 1;
            let runner_job = RunnerJob {
                job_id: format!("{}:r{}:a{}", job.candidate_id, job.round, attempt),
                function_source: job.function_source.clone(),
                test_source: job.test_source.clone(),
                timeout_seconds: self.policy.timeout_seconds,
                measure_coverage: job.measure_coverage,
            };
            let verdict = self.executor.run(&runner_job);
            let retries = match verdict.result.status() {
                Status::Pass => break verdict,
                Status::Fail => self.policy.flake_retries,
                Status::Error => self.policy.error_retries,
            };
            if attempt > retries {
                break verdict;
            }
        };
        let result = ExecutionResult {
            candidate_id: job.candidate_id.clone(),
            round: job.round,
            verdict,
            attempt,
        };
        if let Some(log) = &self.log {
            if let Err(e) = log.write(&result) {
                log::warn!("execution log write failed: {e}");
            }
        }
        result
    }

    /// Execute every job with at most `parallelism` in flight. Results are
    /// returned in job order, one per job.
    pub fn execute_batch(&self, jobs: &[BatchJob], parallelism: usize) -> Vec<ExecutionResult> {
        par_map(jobs, parallelism, |job| self.execute(job))
    }
}

/// Order-preserving parallel map on a scoped thread pool.
pub(crate) fn par_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    assert!(parallelism >= 1, "parallelism must be at least 1");
    if parallelism == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}), running sequentially");
            items.iter().map(f).collect()
        }
    }
}

/// Spawns `program args...` per job, writes the job to its stdin and reads
/// one response object from its stdout. A worker that outlives
/// `timeout_seconds + grace` is killed.
#[derive(Debug, Clone)]
pub struct ProcessExecutor {
    program: String,
    args: Vec<String>,
    grace: Duration,
}

impl ProcessExecutor {
    pub fn new(command: &[String]) -> Option<Self> {
        let (program, args) = command.split_first()?;
        Some(Self {
            program: program.clone(),
            args: args.to_vec(),
            grace: Duration::from_secs_f64(DEFAULT_GRACE_SECONDS),
        })
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }

    fn crash(detail: impl Into<String>, started: Instant) -> Verdict {
        Verdict {
            result: Outcome::error(ErrorKind::Crash, detail),
            coverage: None,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

impl Executor for ProcessExecutor {
    fn run(&self, job: &RunnerJob) -> Verdict {
        let started = Instant::now();
        let mut child = match Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return Self::crash(format!("cannot spawn worker: {e}"), started),
        };
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());
        if let Some(mut stdin) = child.stdin.take() {
            let payload = serde_json::to_vec(job).expect("job serializes");
            // A worker that exits early closes the pipe; its verdict (or the
            // lack of one) is handled below.
            let _ = stdin.write_all(&payload).and_then(|_| stdin.write_all(b"\n"));
        }
        let deadline = Duration::from_secs_f64(job.timeout_seconds.max(0.0)) + self.grace;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if started.elapsed() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Self::crash(format!("wait failed: {e}"), started),
            }
        };
        let Some(status) = status else {
            return Verdict {
                result: Outcome::error(
                    ErrorKind::Timeout,
                    format!("worker unresponsive after {:.1}s", deadline.as_secs_f64()),
                ),
                coverage: None,
                wall_time: started.elapsed().as_secs_f64(),
            };
        };
        let out = stdout.join().unwrap_or_default();
        let err = stderr.join().unwrap_or_default();
        let response = out
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .and_then(|l| serde_json::from_str::<WorkerResponse>(l).ok());
        match response {
            Some(r) if r.job_id == job.job_id => r.into_verdict(),
            Some(r) => Self::crash(format!("response for job {} while running {}", r.job_id, job.job_id), started),
            None => {
                let tail: String = err.chars().rev().take(2000).collect::<Vec<_>>().into_iter().rev().collect();
                Self::crash(format!("no result object (exit {status}): {tail}"), started)
            }
        }
    }
}

/// One scripted answer. All present matchers must hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_contains: Option<String>,
    /// Verdicts for successive executions of the same pair; the last repeats.
    pub results: Vec<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl StubRule {
    pub fn when_function_contains(needle: impl Into<String>, results: Vec<Outcome>) -> Self {
        Self {
            function_sha256: None,
            function_contains: Some(needle.into()),
            test_contains: None,
            results,
            coverage: None,
        }
    }

    fn matches(&self, job: &RunnerJob) -> bool {
        self.function_sha256
            .as_ref()
            .is_none_or(|h| *h == sha256_hex(&job.function_source))
            && self
                .function_contains
                .as_ref()
                .is_none_or(|s| job.function_source.contains(s.as_str()))
            && self
                .test_contains
                .as_ref()
                .is_none_or(|s| job.test_source.contains(s.as_str()))
    }
}

type StubFn = dyn Fn(&RunnerJob, usize) -> Verdict + Send + Sync;

/// In-process executor answering from scripted rules or a closure. The
/// closure receives the job and how many times this exact (function, test)
/// pair has been run before.
pub struct StubExecutor {
    rules: Vec<StubRule>,
    func: Option<Box<StubFn>>,
    seen: Mutex<HashMap<String, usize>>,
}

impl StubExecutor {
    pub fn from_rules(rules: Vec<StubRule>) -> Self {
        Self {
            rules,
            func: None,
            seen: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_fn(f: impl Fn(&RunnerJob, usize) -> Verdict + Send + Sync + 'static) -> Self {
        Self {
            rules: Vec::new(),
            func: Some(Box::new(f)),
            seen: Mutex::new(HashMap::new()),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_rules(crate::jsonl::read_records(path)?))
    }

    fn nth_run(&self, job: &RunnerJob) -> usize {
        let key = sha256_hex(format!("{}\0{}", job.function_source, job.test_source));
        let mut seen = self.seen.lock().unwrap_or_else(|p| p.into_inner());
        let n = seen.entry(key).or_insert(0);
        *n += 1;
        *n - 1
    }
}

impl Executor for StubExecutor {
    fn run(&self, job: &RunnerJob) -> Verdict {
        let n = self.nth_run(job);
        if let Some(f) = &self.func {
            return f(job, n);
        }
        match self.rules.iter().find(|r| r.matches(job)) {
            Some(rule) if !rule.results.is_empty() => {
                let outcome = rule.results[n.min(rule.results.len() - 1)].clone();
                let coverage = if job.measure_coverage { rule.coverage } else { None };
                Verdict {
                    result: outcome,
                    coverage,
                    wall_time: 0.0,
                }
            }
            _ => Verdict::new(Outcome::error(
                ErrorKind::Crash,
                format!("no stub rule matches job {}", job.job_id),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: &str, f: &str) -> BatchJob {
        BatchJob {
            candidate_id: id.into(),
            round: 0,
            function_source: f.into(),
            test_source: "class TestCases: ...".into(),
            measure_coverage: false,
        }
    }

    fn failing() -> Outcome {
        Outcome::fail([("test_x", "AssertionError")])
    }

    fn orchestrator(exec: StubExecutor, flake_retries: u32) -> Orchestrator {
        Orchestrator::new(
            Arc::new(exec),
            ExecutionPolicy {
                flake_retries,
                parallelism: 1,
                ..ExecutionPolicy::default()
            },
        )
    }

    #[test]
    fn passing_pair_single_attempt() {
        let o = orchestrator(StubExecutor::from_rules(vec![StubRule::when_function_contains("", vec![Outcome::Pass])]), 1);
        let r = o.execute(&job("a", "def f(): pass"));
        assert_eq!(r.status(), Status::Pass);
        assert_eq!(r.attempt, 1);
    }

    #[test]
    fn deterministic_failure_uses_the_retry() {
        let o = orchestrator(StubExecutor::from_rules(vec![StubRule::when_function_contains("", vec![failing()])]), 1);
        let r = o.execute(&job("a", "def f(): pass"));
        assert_eq!(r.status(), Status::Fail);
        assert_eq!(r.attempt, 2);
    }

    #[test]
    fn flaky_pair_passes_on_second_attempt() {
        let o = orchestrator(
            StubExecutor::from_rules(vec![StubRule::when_function_contains("", vec![failing(), Outcome::Pass])]),
            1,
        );
        let r = o.execute(&job("a", "def f(): pass"));
        assert_eq!(r.status(), Status::Pass);
        assert_eq!(r.attempt, 2);
    }

    #[test]
    fn errors_are_not_retried_by_default() {
        let exec = StubExecutor::from_rules(vec![StubRule::when_function_contains(
            "",
            vec![Outcome::error(ErrorKind::Crash, "segfault"), Outcome::Pass],
        )]);
        let r = orchestrator(exec, 1).execute(&job("a", "x"));
        assert_eq!(r.verdict.result.error_kind(), Some(ErrorKind::Crash));
        assert_eq!(r.attempt, 1);
    }

    #[test]
    fn unmatched_stub_is_a_crash() {
        let r = orchestrator(StubExecutor::from_rules(vec![]), 0).execute(&job("a", "x"));
        assert_eq!(r.verdict.result.error_kind(), Some(ErrorKind::Crash));
    }

    #[test]
    fn batch_is_independent_of_parallelism() {
        let rules = vec![
            StubRule::when_function_contains("GOOD", vec![Outcome::Pass]),
            StubRule::when_function_contains("SLOW", vec![Outcome::error(ErrorKind::Timeout, "t")]),
            StubRule::when_function_contains("", vec![failing()]),
        ];
        let jobs = vec![job("c", "SLOW"), job("a", "GOOD"), job("b", "BAD")];
        let one = orchestrator(StubExecutor::from_rules(rules.clone()), 1).execute_batch(&jobs, 1);
        let three = orchestrator(StubExecutor::from_rules(rules), 1).execute_batch(&jobs, 3);
        assert_eq!(one, three);
        let ids: Vec<_> = one.iter().map(|r| r.candidate_id.as_str()).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
        assert_eq!(one[0].verdict.result.error_kind(), Some(ErrorKind::Timeout));
        assert!(one[1].is_pass());
        assert!(orchestrator(StubExecutor::from_rules(vec![]), 1).execute_batch(&[], 4).is_empty());
    }

    #[test]
    fn stub_script_round_trips_wire_results() {
        let line = r#"{"function_contains": "x", "results": [["fail", {"t": "tb"}], ["pass", {}]], "coverage": 0.5}"#;
        let rule: StubRule = serde_json::from_str(line).unwrap();
        assert_eq!(rule.results[1], Outcome::Pass);
        let exec = StubExecutor::from_rules(vec![rule]);
        let mut j = RunnerJob {
            job_id: "j".into(),
            function_source: "x".into(),
            test_source: "t".into(),
            timeout_seconds: 1.0,
            measure_coverage: true,
        };
        assert_eq!(exec.run(&j).result.status(), Status::Fail);
        let second = exec.run(&j);
        assert_eq!(second.result, Outcome::Pass);
        assert_eq!(second.coverage, Some(0.5));
        j.measure_coverage = false;
        assert_eq!(exec.run(&j).coverage, None);
    }
}
