//! Pipeline configuration, loaded from TOML. Relative paths are resolved
//! against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusFormat, DEFAULT_SHINGLE_LEN, MIN_SHINGLE_LEN};
use crate::extract::DEFAULT_MAX_FUNCTION_CHARS;
use crate::gateway::{RoleId, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::improve::DEFAULT_MAX_ROUND;
use crate::orchestrator::{DEFAULT_GRACE_SECONDS, DEFAULT_TIMEOUT_SECONDS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    /// Directory of benchmark text to decontaminate against.
    #[serde(default)]
    pub blocklist: Option<PathBuf>,
    #[serde(default = "default_shingle_len")]
    pub shingle_len: usize,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Jsonl
}

fn default_shingle_len() -> usize {
    DEFAULT_SHINGLE_LEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Package allowlist; the shipped list when absent.
    #[serde(default)]
    pub allowlist: Option<PathBuf>,
    #[serde(default)]
    pub denylist: Option<PathBuf>,
    #[serde(default = "default_max_chars")]
    pub max_function_chars: usize,
}

fn default_max_chars() -> usize {
    DEFAULT_MAX_FUNCTION_CHARS
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            allowlist: None,
            denylist: None,
            max_function_chars: DEFAULT_MAX_FUNCTION_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Mock {
        script: PathBuf,
    },
    Http {
        base_url: String,
        /// Environment variable holding the bearer token.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_base_delay")]
        base_delay_ms: u64,
        #[serde(default = "default_max_delay")]
        max_delay_ms: u64,
        #[serde(default = "default_request_timeout")]
        timeout_seconds: u64,
    },
}

fn default_retries() -> u32 {
    4
}
fn default_base_delay() -> u64 {
    500
}
fn default_max_delay() -> u64 {
    30_000
}
fn default_request_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    #[serde(default = "default_provider_id")]
    pub provider: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub system_prompt_file: Option<PathBuf>,
    #[serde(default)]
    pub user_template_file: Option<PathBuf>,
}

fn default_provider_id() -> String {
    "default".into()
}
fn default_model() -> String {
    "default".into()
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl Default for RoleConfig {
    fn default() -> Self {
        Self {
            provider: default_provider_id(),
            model: default_model(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
            system_prompt_file: None,
            user_template_file: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsConfig {
    #[serde(default)]
    pub max_requests: Option<u64>,
    #[serde(default)]
    pub max_tokens: Option<u64>,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
    #[serde(default = "default_burst")]
    pub burst: u32,
}

fn default_burst() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Worker command, e.g. `["python3", "runner.py"]`.
    #[serde(default)]
    pub worker: Option<Vec<String>>,
    /// Scripted verdicts for the in-process stub executor.
    #[serde(default)]
    pub stub_script: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
    #[serde(default = "default_grace")]
    pub grace_seconds: f64,
    #[serde(default = "default_flake_retries")]
    pub flake_retries: u32,
    #[serde(default)]
    pub error_retries: u32,
    /// Defaults to the number of logical CPUs.
    #[serde(default)]
    pub parallelism: Option<usize>,
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECONDS
}
fn default_grace() -> f64 {
    DEFAULT_GRACE_SECONDS
}
fn default_flake_retries() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    #[serde(default = "default_max_round")]
    pub max_round: u32,
}

fn default_max_round() -> u32 {
    DEFAULT_MAX_ROUND
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_round: DEFAULT_MAX_ROUND,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    #[serde(default)]
    pub include_unrefined: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Lower edges of the package-usage bands; powers of ten when absent.
    #[serde(default)]
    pub bucket_edges: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub items: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub filters: FilterConfig,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderConfig>,
    /// Per-role overrides; roles not listed use the shipped prompts and the
    /// `default` provider.
    #[serde(default)]
    pub roles: BTreeMap<RoleId, RoleConfig>,
    #[serde(default)]
    pub limits: LimitsConfig,
    pub execution: ExecutionConfig,
    #[serde(default, rename = "loop")]
    pub improve: LoopConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// `path` relative to the config file's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    pub fn parallelism(&self) -> usize {
        self.execution
            .parallelism
            .unwrap_or_else(crate::orchestrator::default_parallelism)
    }

    /// Check everything that can be checked before any stage runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_for(false)
    }

    /// As [`Self::validate`], but role bindings are not checked when every
    /// provider is replaced on the command line.
    pub fn validate_for(&self, providers_overridden: bool) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let mut paths: Vec<(&str, &Path)> = vec![("corpus.path", &self.corpus.path)];
        if let Some(p) = &self.corpus.blocklist {
            paths.push(("corpus.blocklist", p));
        }
        if let Some(p) = &self.filters.allowlist {
            paths.push(("filters.allowlist", p));
        }
        if let Some(p) = &self.filters.denylist {
            paths.push(("filters.denylist", p));
        }
        for (id, p) in &self.providers {
            if let ProviderConfig::Mock { script } = p {
                paths.push((id.as_str(), script));
            }
        }
        for role in self.roles.values() {
            paths.extend(role.system_prompt_file.as_deref().map(|p| ("roles.system_prompt_file", p)));
            paths.extend(role.user_template_file.as_deref().map(|p| ("roles.user_template_file", p)));
        }
        if let Some(p) = &self.execution.stub_script {
            paths.push(("execution.stub_script", p));
        }
        if let Some(p) = &self.eval.items {
            paths.push(("eval.items", p));
        }
        for (key, p) in paths {
            let full = self.resolve(p);
            if !full.exists() {
                return invalid(format!("{key}: {} does not exist", full.display()));
            }
        }

        if self.corpus.shingle_len < MIN_SHINGLE_LEN {
            return invalid(format!(
                "corpus.shingle_len must be at least {MIN_SHINGLE_LEN}, got {}",
                self.corpus.shingle_len
            ));
        }
        if self.execution.parallelism == Some(0) {
            return invalid("execution.parallelism must be at least 1".into());
        }
        if !(self.execution.timeout_seconds > 0.0) {
            return invalid("execution.timeout_seconds must be positive".into());
        }
        match (&self.execution.worker, &self.execution.stub_script) {
            (Some(w), None) if !w.is_empty() => {}
            (None, Some(_)) => {}
            _ => return invalid("execution needs exactly one of `worker` (non-empty) or `stub_script`".into()),
        }
        if let Some(rps) = self.limits.requests_per_second {
            if !(rps > 0.0) {
                return invalid("limits.requests_per_second must be positive".into());
            }
        }
        if let Some(edges) = &self.dataset.bucket_edges {
            if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) || edges[0] == 0 {
                return invalid("dataset.bucket_edges must be positive and strictly ascending".into());
            }
        }
        for role in RoleId::ALL {
            let provider = self.role(role).provider;
            if !providers_overridden && !self.providers.contains_key(&provider) {
                return invalid(format!("role {role} uses undefined provider `{provider}`"));
            }
        }
        Ok(())
    }

    pub fn role(&self, role: RoleId) -> RoleConfig {
        self.roles.get(&role).cloned().unwrap_or_default()
    }

    /// Serializable copy for manifests: the configuration as written, minus
    /// the output location.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        v
    }
}
