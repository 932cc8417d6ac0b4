//! Test-generator evaluation against canonical solutions: the fraction of
//! solutions that pass their generated suite, and mean line coverage of the
//! solution body.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::extract::assemble;
use crate::gateway::{suite_from_reply, Gateway, GatewayError, RequestMeta, RoleId};
use crate::orchestrator::{par_map, BatchJob, Orchestrator};
use crate::python::{self, FunctionShape};
use crate::sandbox::{ErrorKind, Status};

pub const COVERAGE_METRIC: &str = "line";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    #[serde(rename = "id")]
    pub item_id: String,
    #[serde(default)]
    pub imports: Vec<String>,
    pub solution: String,
}

impl EvalItem {
    pub fn module(&self) -> String {
        assemble(self.imports.iter().map(String::as_str), &self.solution)
    }

    fn function_name(&self) -> Result<String, String> {
        let stmts = python::parse_module(&self.solution).map_err(|e| e.to_string())?;
        match stmts.as_slice() {
            [one] => FunctionShape::of(one, &self.solution)
                .map(|f| f.name)
                .ok_or_else(|| "solution is not a function definition".into()),
            other => Err(format!("expected one function, found {} statements", other.len())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pass,
    Fail,
    Error,
    SuiteRejected,
    ProviderError,
    InvalidItem,
    /// The solution could not run in this environment at all; excluded
    /// from the denominator.
    EnvironmentExcluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub status: ItemStatus,
    pub coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    pub evaluated: usize,
    pub passes: usize,
    /// `None` when no item was evaluated.
    pub accuracy: Option<f64>,
    pub mean_coverage: Option<f64>,
    pub coverage_metric: String,
    pub status_counts: BTreeMap<ItemStatus, usize>,
    pub environment_excluded: Vec<String>,
    pub per_item: Vec<ItemResult>,
}

impl EvalReport {
    /// Fold per-item results. Sums run over sorted values so the result is
    /// independent of item order.
    pub fn from_items(per_item: Vec<ItemResult>) -> Self {
        let mut status_counts = BTreeMap::new();
        for r in &per_item {
            *status_counts.entry(r.status).or_default() += 1;
        }
        let mut environment_excluded: Vec<String> = per_item
            .iter()
            .filter(|r| r.status == ItemStatus::EnvironmentExcluded)
            .map(|r| r.item_id.clone())
            .collect();
        environment_excluded.sort();
        let evaluated = per_item.len() - environment_excluded.len();
        let passes = status_counts.get(&ItemStatus::Pass).copied().unwrap_or(0);
        let mut coverages: Vec<f64> = per_item
            .iter()
            .filter(|r| r.status != ItemStatus::EnvironmentExcluded)
            .filter_map(|r| r.coverage)
            .collect();
        coverages.sort_by(f64::total_cmp);
        let mean_coverage = (!coverages.is_empty()).then(|| coverages.iter().sum::<f64>() / coverages.len() as f64);
        Self {
            items: per_item.len(),
            evaluated,
            passes,
            accuracy: (evaluated > 0).then(|| passes as f64 / evaluated as f64),
            mean_coverage,
            coverage_metric: COVERAGE_METRIC.into(),
            status_counts,
            environment_excluded,
            per_item,
        }
    }
}

pub struct GeneratorEval<'a> {
    gateway: &'a Gateway,
    orchestrator: &'a Orchestrator,
    parallelism: usize,
}

impl<'a> GeneratorEval<'a> {
    pub fn new(gateway: &'a Gateway, orchestrator: &'a Orchestrator) -> Self {
        Self {
            gateway,
            orchestrator,
            parallelism: orchestrator.policy().parallelism.max(1),
        }
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    fn item(&self, item: &EvalItem) -> Result<ItemResult, GatewayError> {
        let result = |status, coverage, detail: String| ItemResult {
            item_id: item.item_id.clone(),
            status,
            coverage,
            detail,
        };
        let name = match item.function_name() {
            Ok(n) => n,
            Err(e) => return Ok(result(ItemStatus::InvalidItem, None, e)),
        };
        let module = item.module();
        let slots = BTreeMap::from([("function", module.as_str())]);
        let mut rejection = String::new();
        let mut suite = None;
        for attempt in 1..=2 {
            let meta = RequestMeta::new(&item.item_id, 0).named(&name).attempt(attempt);
            let reply = match self.gateway.ask(RoleId::TestGenerator, &slots, meta) {
                Ok(r) => r,
                Err(GatewayError::Provider(e)) => return Ok(result(ItemStatus::ProviderError, None, e.to_string())),
                Err(e) => return Err(e),
            };
            match suite_from_reply(&item.item_id, &reply.text) {
                Ok(s) => {
                    suite = Some(s);
                    break;
                }
                Err(r) => rejection = r.to_string(),
            }
        }
        let Some(suite) = suite else {
            return Ok(result(ItemStatus::SuiteRejected, None, rejection));
        };
        let run = self.orchestrator.execute(&BatchJob {
            candidate_id: item.item_id.clone(),
            round: 0,
            function_source: module,
            test_source: suite.source,
            measure_coverage: true,
        });
        let detail = crate::sandbox::to_wire_string(&run.verdict.result);
        let status = match (run.status(), run.verdict.result.error_kind()) {
            (Status::Pass, _) => ItemStatus::Pass,
            (_, Some(ErrorKind::ImportMissing)) => ItemStatus::EnvironmentExcluded,
            (Status::Fail, _) => ItemStatus::Fail,
            (Status::Error, _) => ItemStatus::Error,
        };
        let detail = if status == ItemStatus::Pass { String::new() } else { detail };
        Ok(result(status, run.verdict.coverage, detail))
    }

    /// Evaluate every item. Only run-halting gateway errors abort.
    pub fn evaluate(&self, items: &[EvalItem]) -> Result<EvalReport, GatewayError> {
        let per_item = par_map(items, self.parallelism, |i| self.item(i))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EvalReport::from_items(per_item))
    }
}
