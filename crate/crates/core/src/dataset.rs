//! Prefix/completion pairs, export and package statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rustpython_parser::ast::Stmt;
use rustpython_parser::{lexer, Mode, Tok};
use serde::{Deserialize, Serialize};

use crate::extract::{assemble, slice_imports, FunctionUnit};
use crate::hash::{sha256_hex, short_id, HASH_ALGORITHM};
use crate::jsonl;
use crate::python::{self, FunctionShape};
use crate::refine::RefinedUnit;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub candidate_id: String,
    pub doc_id: String,
    pub unit_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub pair_id: String,
    /// Imports, header and docstring.
    pub prefix: String,
    /// Everything after the docstring.
    pub completion: String,
    pub packages: BTreeSet<String>,
    /// The test class that validated the implementation.
    pub suite: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("{0}: unit is not verified")]
    Unverified(String),
    #[error("{id}: refined source does not parse: {detail}")]
    Syntax { id: String, detail: String },
    #[error("{id}: expected imports and one function, found {detail}")]
    Shape { id: String, detail: String },
    #[error("{0}: function has no docstring to split at")]
    NoDocstring(String),
    #[error("{0}: implementation contains an import statement")]
    ImportInBody(String),
}

/// Split a verified refined unit at the end of its docstring.
pub fn build_pair(unit: &RefinedUnit, original: &FunctionUnit, suite: &str) -> Result<TrainingPair, BuildError> {
    let id = &unit.candidate_id;
    if !unit.verified {
        return Err(BuildError::Unverified(id.clone()));
    }
    let src = unit.refined_source.as_str();
    let stmts = python::parse_module(src).map_err(|e| BuildError::Syntax {
        id: id.clone(),
        detail: e.to_string(),
    })?;
    let mut bindings = Vec::new();
    let mut shapes = Vec::new();
    for stmt in &stmts {
        match stmt {
            Stmt::Import(_) | Stmt::ImportFrom(_) => bindings.extend(python::import_bindings(stmt, src)),
            _ => match FunctionShape::of(stmt, src) {
                Some(shape) => shapes.push(shape),
                None => {
                    let (start, _) = python::span(stmt);
                    let line = src[start..].lines().next().unwrap_or_default();
                    return Err(BuildError::Shape {
                        id: id.clone(),
                        detail: format!("top-level statement `{line}`"),
                    });
                }
            },
        }
    }
    let shape = match shapes.as_slice() {
        [one] if one.name == original.name => one,
        _ => {
            let names: Vec<_> = shapes.iter().map(|s| s.name.as_str()).collect();
            return Err(BuildError::Shape {
                id: id.clone(),
                detail: format!("functions [{}]", names.join(", ")),
            });
        }
    };
    let doc = shape.docstring.as_ref().ok_or_else(|| BuildError::NoDocstring(id.clone()))?;
    let function = shape.text(src);
    let split = doc.end - shape.start;
    if contains_import(function, split) {
        return Err(BuildError::ImportInBody(id.clone()));
    }

    let imports = slice_imports(&bindings, function);
    let whole = assemble(imports.iter().map(|i| i.text.as_str()), function);
    let head_len = whole.len() - (function.trim_end().len() + 1) + split;
    let prefix = whole[..head_len].to_string();
    let completion = whole[head_len..].to_string();
    Ok(TrainingPair {
        pair_id: short_id(&[id, &prefix, &completion]),
        packages: imports.into_iter().map(|i| i.root_package).collect(),
        prefix,
        completion,
        suite: suite.to_string(),
        provenance: Provenance {
            candidate_id: id.clone(),
            doc_id: original.doc_id.clone(),
            unit_id: original.unit_id.clone(),
        },
    })
}

/// Whether an `import` keyword occurs at or after byte `from` of `function`.
fn contains_import(function: &str, from: usize) -> bool {
    lexer::lex(function, Mode::Module)
        .filter_map(Result::ok)
        .any(|(tok, range)| matches!(tok, Tok::Import) && usize::from(range.start()) >= from)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyBucket {
    pub min_usage: usize,
    /// Exclusive upper edge; `None` for the open last band.
    pub max_usage: Option<usize>,
    pub packages: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageStats {
    pub per_package_counts: BTreeMap<String, usize>,
    pub unique_package_count: usize,
    /// Non-empty bands only, in ascending order.
    pub frequency_buckets: Vec<FrequencyBucket>,
}

/// Count pairs per package and histogram the counts into usage bands.
/// `edges` are ascending lower band edges; by default 1, 10, 100, ...
pub fn compute_stats(pairs: &[TrainingPair], edges: Option<&[usize]>) -> PackageStats {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in pairs {
        for pkg in &p.packages {
            *counts.entry(pkg.clone()).or_default() += 1;
        }
    }
    let edges: Vec<usize> = match edges {
        Some(e) => e.to_vec(),
        None => {
            let max = counts.values().copied().max().unwrap_or(0);
            std::iter::successors(Some(1usize), |e| e.checked_mul(10))
                .take_while(|e| *e <= max)
                .collect()
        }
    };
    let mut per_band = vec![0usize; edges.len()];
    for &c in counts.values() {
        if let Some(i) = edges.iter().rposition(|e| c >= *e) {
            per_band[i] += 1;
        }
    }
    let frequency_buckets = per_band
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0)
        .map(|(i, n)| FrequencyBucket {
            min_usage: edges[i],
            max_usage: edges.get(i + 1).copied(),
            packages: *n,
        })
        .collect();
    PackageStats {
        unique_package_count: counts.len(),
        per_package_counts: counts,
        frequency_buckets,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub file: String,
    pub hash_algorithm: String,
    pub sha256: String,
    pub config: serde_json::Value,
    pub stats: PackageStats,
}

/// Write `pairs` to `dir/dataset.jsonl` and the manifest beside it. Both
/// files are written atomically.
pub fn export(
    pairs: &[TrainingPair],
    dir: &Path,
    config: serde_json::Value,
    edges: Option<&[usize]>,
) -> std::io::Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let data = dir.join(DATASET_FILE);
    jsonl::write_records(&data, pairs)?;
    let bytes = std::fs::read(&data)?;
    let manifest = Manifest {
        count: pairs.len(),
        file: DATASET_FILE.into(),
        hash_algorithm: HASH_ALGORITHM.into(),
        sha256: sha256_hex(&bytes),
        config,
        stats: compute_stats(pairs, edges),
    };
    jsonl::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceDocument;
    use crate::extract::{extract_functions, ExtractOptions, ExtractStats};
    use proptest::prelude::*;

    const GET_VAR_REFINED: &str = include_str!("../tests/fixtures/get_var_refined.py");

    fn unit_of(src: &str) -> FunctionUnit {
        let doc = SourceDocument::new("m.py", src);
        extract_functions(&doc, &ExtractOptions::default(), &mut ExtractStats::default()).remove(0)
    }

    fn refined(src: &str) -> RefinedUnit {
        RefinedUnit {
            candidate_id: "c".into(),
            refined_source: src.into(),
            docstring: String::new(),
            verified: true,
            refined: true,
            verification: None,
        }
    }

    fn pair(src: &str) -> TrainingPair {
        build_pair(&refined(src), &unit_of(src), "class TestCases: pass").unwrap()
    }

    #[test]
    fn get_var_split() {
        let p = pair(GET_VAR_REFINED);
        assert!(p.prefix.starts_with("import numpy as np\n\ndef get_var(data):\n    \"\"\"\n"));
        assert!(p.prefix.ends_with("    2.0\n    \"\"\""));
        assert!(p.completion.starts_with("\n    # Calculate the mean of the data\n    mean = np.mean(data)"));
        assert!(p.completion.ends_with("    return var\n"));
        assert_eq!(p.packages, BTreeSet::from(["numpy".to_string()]));
        assert!(python::is_valid_module(&format!("{}{}", p.prefix, p.completion)));
    }

    #[test]
    fn docstring_plus_return() {
        let p = pair("def f():\n    \"\"\"Zero.\"\"\"\n    return 0\n");
        assert_eq!(p.prefix, "def f():\n    \"\"\"Zero.\"\"\"");
        assert_eq!(p.completion, "\n    return 0\n");
    }

    #[test]
    fn only_used_imports_reach_the_prefix() {
        let src = "import os\nimport re\n\ndef f(s):\n    \"\"\"Split.\"\"\"\n    return re.split(',', s)\n";
        let p = pair(src);
        assert!(p.prefix.starts_with("import re\n\ndef f(s):"));
        assert!(!p.prefix.contains("import os"));
    }

    #[test]
    fn extra_statements_and_inner_imports_are_build_errors() {
        let extra = "import logging\nlogging.basicConfig(level=logging.INFO)\n\ndef f():\n    \"\"\"D.\"\"\"\n    return 1\n";
        assert!(matches!(
            build_pair(&refined(extra), &unit_of(extra), ""),
            Err(BuildError::Shape { .. })
        ));
        let inner = "def f():\n    \"\"\"D.\"\"\"\n    import os\n    return os.sep\n";
        assert_eq!(
            build_pair(&refined(inner), &unit_of(inner), ""),
            Err(BuildError::ImportInBody("c".into()))
        );
        let nodoc = "def f():\n    return 1\n";
        assert_eq!(
            build_pair(&refined(nodoc), &unit_of(nodoc), ""),
            Err(BuildError::NoDocstring("c".into()))
        );
    }

    fn with_packages(pkgs: &[&str]) -> TrainingPair {
        let mut p = pair("def f():\n    \"\"\"D.\"\"\"\n    return 0\n");
        p.packages = pkgs.iter().map(|s| s.to_string()).collect();
        p
    }

    #[test]
    fn stats_by_hand() {
        let s = compute_stats(
            &[with_packages(&["numpy"]), with_packages(&["numpy", "os"]), with_packages(&["re"])],
            None,
        );
        assert_eq!(s.per_package_counts["numpy"], 2);
        assert_eq!(s.per_package_counts["os"], 1);
        assert_eq!(s.per_package_counts["re"], 1);
        assert_eq!(s.unique_package_count, 3);
        assert_eq!(
            s.frequency_buckets,
            vec![FrequencyBucket {
                min_usage: 1,
                max_usage: None,
                packages: 3
            }]
        );
        let empty = compute_stats(&[], None);
        assert_eq!(empty.unique_package_count, 0);
        assert!(empty.frequency_buckets.is_empty());
    }

    #[test]
    fn custom_band_edges() {
        let pairs: Vec<_> = (0..12).map(|_| with_packages(&["a"])).chain([with_packages(&["b"])]).collect();
        let s = compute_stats(&pairs, Some(&[1, 5, 10]));
        assert_eq!(
            s.frequency_buckets,
            vec![
                FrequencyBucket {
                    min_usage: 1,
                    max_usage: Some(5),
                    packages: 1
                },
                FrequencyBucket {
                    min_usage: 10,
                    max_usage: None,
                    packages: 1
                },
            ]
        );
    }

    #[test]
    fn export_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![pair(GET_VAR_REFINED), with_packages(&["re"])];
        let m1 = export(&pairs, dir.path(), serde_json::json!({"max_round": 3}), None).unwrap();
        assert_eq!(m1.count, 2);
        let back: Vec<TrainingPair> = jsonl::read_records(&dir.path().join(DATASET_FILE)).unwrap();
        assert_eq!(back, pairs);
        let m2 = export(&pairs, dir.path(), serde_json::json!({"max_round": 3}), None).unwrap();
        assert_eq!(m1.sha256, m2.sha256);

        let empty = tempfile::tempdir().unwrap();
        let m = export(&[], empty.path(), serde_json::Value::Null, None).unwrap();
        assert_eq!(m.count, 0);
        assert_eq!(std::fs::read(empty.path().join(DATASET_FILE)).unwrap(), b"");
    }

    proptest! {
        #[test]
        fn pairs_reassemble(
            name in "[a-z][a-z0-9_]{0,8}",
            doc in "[A-Za-z ,.]{1,30}",
            body in proptest::collection::vec("[a-z]{1,6} = [0-9]{1,3}", 1..5),
        ) {
            let mut src = format!("import os\n\ndef {name}(x):\n    \"\"\"{doc}\"\"\"\n");
            for line in &body {
                src.push_str(&format!("    {line}\n"));
            }
            src.push_str("    return os.sep\n");
            prop_assume!(python::is_valid_module(&src));
            let p = pair(&src);
            prop_assert!(p.prefix.ends_with("\"\"\""));
            let whole = format!("{}{}", p.prefix, p.completion);
            prop_assert!(python::is_valid_module(&whole));
            prop_assert_eq!(whole, src);
        }
    }
}
