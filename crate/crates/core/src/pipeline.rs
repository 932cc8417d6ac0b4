//! Stage runner. Each stage reads the previous stage's artifact from the
//! output directory and writes its own, so stages can be run one at a time
//! or all in sequence with resumption.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ConfigError, PipelineConfig, ProviderConfig};
use crate::corpus::{self, Blocklist, DecontaminationStats, DedupStats, IngestStats, SourceDocument};
use crate::dataset::{self, TrainingPair};
use crate::eval::{EvalItem, GeneratorEval};
use crate::extract::{self, Denylist, ExtractOptions, ExtractStats, FunctionUnit, PackageAllowlist, ScreenStats};
use crate::gateway::{
    AgentRole, Budget, Gateway, GatewayError, HttpProvider, MockProvider, Provider, ProviderBinding, RateLimiter,
    ReqwestTransport, RetryPolicy, RoleId, Sampling,
};
use crate::hash::sha256_hex;
use crate::improve::{Candidate, CandidateStatus, ImprovementLoop, LoopError, LoopState};
use crate::jsonl::{self, JsonlLog};
use crate::orchestrator::{par_map, ExecutionPolicy, Executor, Orchestrator, ProcessExecutor, StubExecutor};
use crate::refine::{RefinedUnit, Refiner};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const UNITS_FILE: &str = "units.jsonl";
pub const SUITES_FILE: &str = "suites.jsonl";
pub const PARTITION_FILE: &str = "partition.jsonl";
pub const REFINED_FILE: &str = "refined.jsonl";
pub const REFINE_AUDIT_FILE: &str = "refine_audit.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const RUN_STATE_FILE: &str = "run_state.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const REQUEST_LOG_FILE: &str = "requests.jsonl";
pub const EXECUTION_LOG_FILE: &str = "execution.jsonl";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Extract,
    GenTests,
    Execute,
    Improve,
    Refine,
    Export,
    Stats,
    EvalGenerator,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Self::Ingest,
        Self::Extract,
        Self::GenTests,
        Self::Execute,
        Self::Improve,
        Self::Refine,
        Self::Export,
        Self::Stats,
        Self::EvalGenerator,
    ];

    /// Stages run by [`Pipeline::run_all`], in order.
    pub const PIPELINE: [Stage; 8] = [
        Self::Ingest,
        Self::Extract,
        Self::GenTests,
        Self::Execute,
        Self::Improve,
        Self::Refine,
        Self::Export,
        Self::Stats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ingest => "ingest",
            Self::Extract => "extract",
            Self::GenTests => "gen-tests",
            Self::Execute => "execute",
            Self::Improve => "improve",
            Self::Refine => "refine",
            Self::Export => "export",
            Self::Stats => "stats",
            Self::EvalGenerator => "eval-generator",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("budget exhausted, resume with --resume: {0}")]
    Budget(String),
    #[error("output directory is in use ({0} exists); remove it if no other run is active")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code. 2 is left to command-line usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io(_) => 1,
            Self::Config(_) => 3,
            Self::Input(_) => 4,
            Self::Provider(_) => 5,
            Self::Budget(_) => 6,
            Self::Locked(_) => 7,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<GatewayError> for PipelineError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Budget(m) => Self::Budget(m),
            GatewayError::Provider(p) => Self::Provider(p.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<LoopError> for PipelineError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Halted(g) => g.into(),
            LoopError::Checkpoint(io) => Self::Io(io),
        }
    }
}

fn input_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    pub output_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
    /// Replace every configured provider with this mock script.
    pub mock_script: Option<PathBuf>,
}

/// Which stages have completed, with their reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub completed: BTreeMap<Stage, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub report: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: Vec<StageReport>,
    pub dataset: dataset::Manifest,
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    resume: bool,
    parallelism: usize,
    mock_script: Option<PathBuf>,
    gateway: OnceLock<Gateway>,
    orchestrator: OnceLock<Orchestrator>,
    mocks: OnceLock<Vec<Arc<MockProvider>>>,
    _lock: Lock,
}

impl Pipeline {
    /// Validate the configuration and take the output directory's lock.
    /// Nothing is written when validation fails.
    pub fn open(config: PipelineConfig, options: RunOptions) -> Result<Self, PipelineError> {
        config.validate_for(options.mock_script.is_some())?;
        if let Some(p) = &options.mock_script {
            if !p.exists() {
                return Err(PipelineError::Config(format!("mock script {} does not exist", p.display())));
            }
        }
        if options.parallelism == Some(0) {
            return Err(PipelineError::Config("parallelism must be at least 1".into()));
        }
        let out = options.output_dir.clone().unwrap_or_else(|| config.output_dir());
        std::fs::create_dir_all(&out)?;
        let lock = Lock::acquire(&out)?;
        Ok(Self {
            parallelism: options.parallelism.unwrap_or_else(|| config.parallelism()),
            config,
            out,
            resume: options.resume,
            mock_script: options.mock_script,
            gateway: OnceLock::new(),
            orchestrator: OnceLock::new(),
            mocks: OnceLock::new(),
            _lock: lock,
        })
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_prompt(&self, file: &Option<PathBuf>, default: &str) -> Result<String, PipelineError> {
        match file {
            Some(p) => std::fs::read_to_string(self.config.resolve(p))
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display()))),
            None => Ok(default.to_string()),
        }
    }

    fn build_gateway(&self) -> Result<(Gateway, Vec<Arc<MockProvider>>), PipelineError> {
        let mut providers: BTreeMap<String, Arc<dyn Provider>> = BTreeMap::new();
        let mut mocks = Vec::new();
        if let Some(script) = &self.mock_script {
            let mock = Arc::new(MockProvider::load(script).map_err(input_err(script))?);
            mocks.push(mock.clone());
            let mut ids: BTreeSet<String> = self.config.providers.keys().cloned().collect();
            ids.extend(RoleId::ALL.iter().map(|r| self.config.role(*r).provider));
            for id in ids {
                providers.insert(id, mock.clone());
            }
        } else {
            for (id, p) in &self.config.providers {
                let provider: Arc<dyn Provider> = match p {
                    ProviderConfig::Mock { script } => {
                        let path = self.config.resolve(script);
                        let mock = Arc::new(MockProvider::load(&path).map_err(input_err(&path))?);
                        mocks.push(mock.clone());
                        mock
                    }
                    ProviderConfig::Http {
                        base_url,
                        api_key_env,
                        max_retries,
                        base_delay_ms,
                        max_delay_ms,
                        timeout_seconds,
                    } => {
                        let key = match api_key_env {
                            Some(var) => Some(std::env::var(var).map_err(|_| {
                                PipelineError::Config(format!("provider {id}: environment variable {var} is not set"))
                            })?),
                            None => None,
                        };
                        let transport = ReqwestTransport::new(Duration::from_secs(*timeout_seconds))
                            .map_err(|e| PipelineError::Config(e.to_string()))?;
                        let policy = RetryPolicy {
                            max_retries: *max_retries,
                            base_delay: Duration::from_millis(*base_delay_ms),
                            max_delay: Duration::from_millis(*max_delay_ms),
                        };
                        Arc::new(HttpProvider::new(transport, base_url, key, policy))
                    }
                };
                providers.insert(id.clone(), provider);
            }
        }

        let mut gw = Gateway::new();
        for (id, p) in providers {
            gw = gw.with_provider(id, p);
        }
        for role in RoleId::ALL {
            let rc = self.config.role(role);
            gw = gw.with_role(AgentRole {
                role_id: role,
                system_prompt: self.load_prompt(&rc.system_prompt_file, role.default_system_prompt())?,
                user_template: self.load_prompt(&rc.user_template_file, role.default_user_template())?,
                provider: ProviderBinding {
                    provider_id: rc.provider.clone(),
                    model: rc.model.clone(),
                },
                sampling: Sampling {
                    temperature: rc.temperature,
                    max_tokens: rc.max_tokens,
                    seed: rc.seed,
                },
            });
        }
        let limits = &self.config.limits;
        gw = gw.with_budget(Budget::new(limits.max_requests, limits.max_tokens));
        if let Some(rps) = limits.requests_per_second {
            gw = gw.with_limiter(RateLimiter::new(rps, limits.burst));
        }
        gw = gw.with_audit_log(JsonlLog::append_to(&self.path(REQUEST_LOG_FILE))?);
        Ok((gw, mocks))
    }

    fn gateway(&self) -> Result<&Gateway, PipelineError> {
        if let Some(gw) = self.gateway.get() {
            return Ok(gw);
        }
        let (gw, mocks) = self.build_gateway()?;
        let _ = self.mocks.set(mocks);
        Ok(self.gateway.get_or_init(|| gw))
    }

    /// Unscripted mock lookups are an error, never a silent fallback.
    fn check_mocks(&self) -> Result<(), PipelineError> {
        let misses: Vec<String> = self.mocks.get().into_iter().flatten().flat_map(|m| m.misses()).collect();
        if misses.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Provider(format!(
                "{} unscripted mock request(s), first: {}",
                misses.len(),
                misses[0]
            )))
        }
    }

    fn orchestrator(&self) -> Result<&Orchestrator, PipelineError> {
        if let Some(o) = self.orchestrator.get() {
            return Ok(o);
        }
        let ex = &self.config.execution;
        let executor: Arc<dyn Executor> = match (&ex.worker, &ex.stub_script) {
            (Some(cmd), _) => Arc::new(
                ProcessExecutor::new(cmd)
                    .ok_or_else(|| PipelineError::Config("execution.worker is empty".into()))?
                    .with_grace(Duration::from_secs_f64(ex.grace_seconds)),
            ),
            (None, Some(script)) => {
                let path = self.config.resolve(script);
                Arc::new(StubExecutor::load(&path).map_err(input_err(&path))?)
            }
            (None, None) => return Err(PipelineError::Config("no executor configured".into())),
        };
        let policy = ExecutionPolicy {
            timeout_seconds: ex.timeout_seconds,
            flake_retries: ex.flake_retries,
            error_retries: ex.error_retries,
            parallelism: self.parallelism,
        };
        let orch = Orchestrator::new(executor, policy).with_log(JsonlLog::append_to(&self.path(EXECUTION_LOG_FILE))?);
        Ok(self.orchestrator.get_or_init(|| orch))
    }

    fn improvement_loop(&self) -> Result<ImprovementLoop<'_>, PipelineError> {
        Ok(ImprovementLoop::new(self.gateway()?, self.orchestrator()?, self.config.improve.max_round)
            .with_parallelism(self.parallelism)
            .with_checkpoint(self.path(PARTITION_FILE)))
    }

    fn read<T: serde::de::DeserializeOwned>(&self, name: &str, producer: Stage) -> Result<Vec<T>, PipelineError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(PipelineError::Input(format!(
                "{} not found; run the {producer} stage first",
                path.display()
            )));
        }
        jsonl::read_records(&path).map_err(input_err(&path))
    }

    fn load_loop_state(&self) -> Result<LoopState, PipelineError> {
        let path = self.path(PARTITION_FILE);
        if !path.exists() {
            return Err(PipelineError::Input(format!(
                "{} not found; run the execute stage first",
                path.display()
            )));
        }
        LoopState::load(&path).map_err(input_err(&path))
    }

    pub fn run_state(&self) -> Result<RunState, PipelineError> {
        let path = self.path(RUN_STATE_FILE);
        if path.exists() {
            jsonl::read_json(&path).map_err(input_err(&path))
        } else {
            Ok(RunState::default())
        }
    }

    /// Run one stage, record its report, and invalidate later stages.
    pub fn run_stage(&self, stage: Stage) -> Result<Value, PipelineError> {
        log::info!("stage {stage}");
        let report = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Extract => self.extract()?,
            Stage::GenTests => self.gen_tests()?,
            Stage::Execute => self.execute()?,
            Stage::Improve => self.improve()?,
            Stage::Refine => self.refine()?,
            Stage::Export => self.export()?,
            Stage::Stats => self.stats()?,
            Stage::EvalGenerator => self.eval_generator()?,
        };
        let mut state = self.run_state()?;
        if stage != Stage::EvalGenerator {
            state.completed.retain(|s, _| *s < stage || *s == Stage::EvalGenerator);
        }
        state.completed.insert(stage, report.clone());
        jsonl::write_json(&self.path(RUN_STATE_FILE), &state)?;
        Ok(report)
    }

    /// Run every pipeline stage in order. With `resume`, stages already
    /// recorded as complete are skipped. Returns `None` when stopped early
    /// by `stop_after`.
    pub fn run_all(&self, stop_after: Option<Stage>) -> Result<Option<RunManifest>, PipelineError> {
        if !self.resume {
            jsonl::write_json(&self.path(RUN_STATE_FILE), &RunState::default())?;
        }
        for stage in Stage::PIPELINE {
            if self.run_state()?.completed.contains_key(&stage) {
                log::info!("stage {stage} already complete");
            } else {
                self.run_stage(stage)?;
            }
            if stop_after == Some(stage) {
                return Ok(None);
            }
        }
        let state = self.run_state()?;
        let manifest_path = self.path(dataset::MANIFEST_FILE);
        let manifest = RunManifest {
            stages: Stage::PIPELINE
                .iter()
                .map(|s| StageReport {
                    stage: *s,
                    report: state.completed.get(s).cloned().unwrap_or(Value::Null),
                })
                .collect(),
            dataset: jsonl::read_json(&manifest_path).map_err(input_err(&manifest_path))?,
        };
        jsonl::write_json(&self.path(RUN_MANIFEST_FILE), &manifest)?;
        Ok(Some(manifest))
    }

    fn ingest(&self) -> Result<Value, PipelineError> {
        let c = &self.config.corpus;
        let blocklist = match &c.blocklist {
            Some(dir) => Blocklist::load_dir(&self.config.resolve(dir), c.shingle_len),
            None => Blocklist::new(c.shingle_len),
        }
        .map_err(|e| PipelineError::Input(e.to_string()))?;
        let mut ingest = IngestStats::default();
        let mut dedup = DedupStats::default();
        let mut decon = DecontaminationStats::default();
        let docs: Vec<SourceDocument> = {
            let stream = corpus::ingest(&self.config.resolve(&c.path), c.format, &mut ingest)
                .map_err(|e| PipelineError::Input(e.to_string()))?;
            corpus::decontaminate(corpus::dedup_exact(stream, &mut dedup), &blocklist, &mut decon).collect()
        };
        for d in &ingest.diagnostics {
            log::warn!("corpus: {d}");
        }
        jsonl::write_records(&self.path(DOCUMENTS_FILE), &docs)?;
        Ok(json!({
            "records": ingest.records,
            "skipped": ingest.skipped,
            "duplicates": dedup.duplicates,
            "decontaminated": decon.dropped,
            "decontaminated_by_benchmark": decon.dropped_by_benchmark,
            "documents": docs.len(),
        }))
    }

    fn extract(&self) -> Result<Value, PipelineError> {
        let docs: Vec<SourceDocument> = self.read(DOCUMENTS_FILE, Stage::Ingest)?;
        let f = &self.config.filters;
        let allowlist = match &f.allowlist {
            Some(p) => PackageAllowlist::load(&self.config.resolve(p)),
            None => PackageAllowlist::from_text(extract::DEFAULT_ALLOWLIST),
        }
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        let denylist = match &f.denylist {
            Some(p) => Denylist::load(&self.config.resolve(p)),
            None => Ok(Denylist::default()),
        }
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        let options = ExtractOptions {
            max_function_chars: f.max_function_chars,
        };
        let per_doc = par_map(&docs, self.parallelism, |d| {
            let mut stats = ExtractStats::default();
            let units = extract::extract_functions(d, &options, &mut stats);
            (units, stats)
        });
        let mut stats = ExtractStats::default();
        let mut units = Vec::new();
        for (u, s) in per_doc {
            units.extend(u);
            stats.merge(s);
        }
        let all = units.len();
        let d_pkg = extract::filter_by_packages(units, &allowlist);
        let n_pkg = d_pkg.len();
        let mut screen = ScreenStats::default();
        let safe = extract::safety_screen(d_pkg, &denylist, &mut screen);
        jsonl::write_records(&self.path(UNITS_FILE), &safe)?;
        Ok(json!({
            "docs": stats.documents,
            "units": all,
            "d_pkg": n_pkg,
            "d_p_safe": safe.len(),
            "parse_errors": stats.parse_errors,
            "too_long": stats.too_long,
            "roundtrip_failures": stats.roundtrip_failures,
            "denied_by_pattern": screen.dropped_by_pattern,
        }))
    }

    fn gen_tests(&self) -> Result<Value, PipelineError> {
        let units: Vec<FunctionUnit> = self.read(UNITS_FILE, Stage::Extract)?;
        let path = self.path(SUITES_FILE);
        let done: Vec<Candidate> = if self.resume && path.exists() {
            jsonl::read_records(&path).map_err(input_err(&path))?
        } else {
            Vec::new()
        };
        let lp = self.improvement_loop()?;
        let candidates = match lp.generate_suites(&units, done) {
            Ok(c) => c,
            Err((partial, e)) => {
                jsonl::write_records(&path, &partial)?;
                return Err(e.into());
            }
        };
        jsonl::write_records(&path, &candidates)?;
        self.check_mocks()?;
        let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
        for c in &candidates {
            if let Some(s) = &c.skip {
                *skipped.entry(json!(s.reason).as_str().unwrap_or_default().to_string()).or_default() += 1;
            }
        }
        Ok(json!({
            "units": units.len(),
            "suites": candidates.iter().filter(|c| c.suite.is_some()).count(),
            "skipped": skipped,
        }))
    }

    fn execute(&self) -> Result<Value, PipelineError> {
        let candidates: Vec<Candidate> = self.read(SUITES_FILE, Stage::GenTests)?;
        let state = self.improvement_loop()?.initialize(candidates)?;
        Ok(partition_report(&state))
    }

    fn improve(&self) -> Result<Value, PipelineError> {
        let state = self.load_loop_state()?;
        let state = self.improvement_loop()?.resume(state)?;
        self.check_mocks()?;
        Ok(partition_report(&state))
    }

    fn refine(&self) -> Result<Value, PipelineError> {
        let state = self.load_loop_state()?;
        if !state.finished {
            return Err(PipelineError::Input("improvement loop has not finished; run improve first".into()));
        }
        let audit_path = self.path(REFINE_AUDIT_FILE);
        if audit_path.exists() {
            std::fs::remove_file(&audit_path)?;
        }
        let refiner = Refiner::new(self.gateway()?, self.orchestrator()?)
            .with_parallelism(self.parallelism)
            .with_audit_log(JsonlLog::append_to(&audit_path)?);
        let out = refiner.refine_all(&state, self.config.refine.include_unrefined)?;
        jsonl::write_records(&self.path(REFINED_FILE), &out.units)?;
        self.check_mocks()?;
        Ok(serde_json::to_value(&out.report).expect("report serializes"))
    }

    fn export(&self) -> Result<Value, PipelineError> {
        let refined: Vec<RefinedUnit> = self.read(REFINED_FILE, Stage::Refine)?;
        let state = self.load_loop_state()?;
        let docs: Vec<SourceDocument> = self.read(DOCUMENTS_FILE, Stage::Ingest)?;
        let kept_docs: BTreeSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        let mut pairs = Vec::new();
        let mut diagnostics = Vec::new();
        for u in &refined {
            let c = state
                .candidates
                .get(&u.candidate_id)
                .filter(|c| c.status == CandidateStatus::Passed)
                .ok_or_else(|| PipelineError::Input(format!("{}: not a passed candidate", u.candidate_id)))?;
            if !kept_docs.contains(c.unit.doc_id.as_str()) {
                return Err(PipelineError::Input(format!(
                    "{}: source document {} is not in the ingested corpus",
                    u.candidate_id, c.unit.doc_id
                )));
            }
            let suite = &c.suite.as_ref().expect("passed candidates have a suite").source;
            match dataset::build_pair(u, &c.unit, suite) {
                Ok(p) => pairs.push(p),
                Err(e) => {
                    log::warn!("{e}");
                    diagnostics.push(e.to_string());
                }
            }
        }
        let manifest = dataset::export(
            &pairs,
            &self.out,
            self.config.snapshot(),
            self.config.dataset.bucket_edges.as_deref(),
        )?;
        Ok(json!({
            "pairs": manifest.count,
            "build_errors": diagnostics.len(),
            "diagnostics": diagnostics,
            "sha256": manifest.sha256,
        }))
    }

    fn stats(&self) -> Result<Value, PipelineError> {
        let pairs: Vec<TrainingPair> = self.read(dataset::DATASET_FILE, Stage::Export)?;
        let stats = dataset::compute_stats(&pairs, self.config.dataset.bucket_edges.as_deref());
        jsonl::write_json(&self.path(STATS_FILE), &stats)?;
        Ok(json!({
            "pairs": pairs.len(),
            "unique_package_count": stats.unique_package_count,
            "frequency_buckets": stats.frequency_buckets,
        }))
    }

    fn eval_generator(&self) -> Result<Value, PipelineError> {
        let path = self
            .config
            .eval
            .items
            .as_ref()
            .map(|p| self.config.resolve(p))
            .ok_or_else(|| PipelineError::Config("eval.items is not set".into()))?;
        let items: Vec<EvalItem> = jsonl::read_records(&path).map_err(input_err(&path))?;
        let report = GeneratorEval::new(self.gateway()?, self.orchestrator()?)
            .with_parallelism(self.parallelism)
            .evaluate(&items)?;
        jsonl::write_json(&self.path(EVAL_REPORT_FILE), &report)?;
        self.check_mocks()?;
        Ok(json!({
            "items": report.items,
            "evaluated": report.evaluated,
            "passes": report.passes,
            "accuracy": report.accuracy,
            "mean_coverage": report.mean_coverage,
            "environment_excluded": report.environment_excluded.len(),
        }))
    }
}

fn partition_report(state: &LoopState) -> Value {
    let p = &state.partition;
    let exhausted = state
        .candidates
        .values()
        .filter(|c| c.status == CandidateStatus::Exhausted)
        .count();
    json!({
        "admitted": p.admitted(),
        "d_pass": p.d_pass.len(),
        "d_curr": p.d_curr.len(),
        "d_skipped": p.d_skipped.len(),
        "exhausted": exhausted,
        "round": p.round,
        "finished": state.finished,
        "pass_counts": state.pass_counts(),
        "rounds": state.rounds,
    })
}

/// Hash of a file's bytes, for comparing run outputs.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(std::fs::read(path)?))
}
