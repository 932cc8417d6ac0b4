//! Function-unit extraction, package filtering and safety screening.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::SourceDocument;
use crate::hash::short_id;
use crate::python::{self, FunctionShape, ImportBinding};

pub const DEFAULT_MAX_FUNCTION_CHARS: usize = 4096;

pub const DEFAULT_ALLOWLIST: &str = include_str!("../defaults/allowlist.txt");
pub const DEFAULT_DENYLIST: &str = include_str!("../defaults/denylist.txt");

#[derive(Debug, thiserror::Error)]
pub enum ListError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("package allowlist is empty")]
    EmptyAllowlist,
    #[error("invalid denylist pattern `{pattern}`: {source}")]
    BadPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportStatement {
    pub text: String,
    pub root_package: String,
}

/// Byte range of a unit inside its source document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionUnit {
    pub unit_id: String,
    pub doc_id: String,
    pub span: SourceSpan,
    pub imports: Vec<ImportStatement>,
    pub name: String,
    pub signature: String,
    pub body: String,
    pub docstring: Option<String>,
    pub packages: BTreeSet<String>,
}

impl FunctionUnit {
    /// Standalone module text: sliced imports followed by the function.
    pub fn source(&self) -> String {
        assemble(self.imports.iter().map(|i| i.text.as_str()), &self.body)
    }
}

pub(crate) fn assemble<'a>(imports: impl Iterator<Item = &'a str>, body: &str) -> String {
    let mut out = String::new();
    for line in imports {
        out.push_str(line);
        out.push('\n');
    }
    if !out.is_empty() {
        out.push('\n');
    }
    out.push_str(body.trim_end());
    out.push('\n');
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    pub max_function_chars: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            max_function_chars: DEFAULT_MAX_FUNCTION_CHARS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractStats {
    pub documents: usize,
    pub parse_errors: usize,
    pub units: usize,
    pub too_long: usize,
    pub roundtrip_failures: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub diagnostics: Vec<String>,
}

impl ExtractStats {
    pub fn merge(&mut self, other: ExtractStats) {
        self.documents += other.documents;
        self.parse_errors += other.parse_errors;
        self.units += other.units;
        self.too_long += other.too_long;
        self.roundtrip_failures += other.roundtrip_failures;
        self.diagnostics.extend(other.diagnostics);
    }
}

/// Extract every top-level function of `doc` together with the top-level
/// imports its body refers to. Class methods and nested functions are not
/// extracted.
pub fn extract_functions(
    doc: &SourceDocument,
    options: &ExtractOptions,
    stats: &mut ExtractStats,
) -> Vec<FunctionUnit> {
    stats.documents += 1;
    let source = doc.content.as_str();
    let stmts = match python::parse_module(source) {
        Ok(stmts) => stmts,
        Err(e) => {
            stats.parse_errors += 1;
            stats.diagnostics.push(format!("{}: {e}", doc.path));
            return Vec::new();
        }
    };

    let bindings: Vec<ImportBinding> = stmts
        .iter()
        .flat_map(|s| python::import_bindings(s, source))
        .collect();

    let mut units = Vec::new();
    for stmt in &stmts {
        let Some(shape) = FunctionShape::of(stmt, source) else {
            continue;
        };
        let body = shape.text(source);
        if body.chars().count() > options.max_function_chars {
            stats.too_long += 1;
            continue;
        }
        let imports = slice_imports(&bindings, body);
        let packages = imports.iter().map(|i| i.root_package.clone()).collect();
        let normalized: String = body.lines().map(str::trim_end).collect::<Vec<_>>().join("\n");
        let span = SourceSpan {
            start: shape.start,
            end: shape.end,
        };
        let unit = FunctionUnit {
            unit_id: short_id(&[
                &doc.doc_id,
                &span.start.to_string(),
                &span.end.to_string(),
                &normalized,
            ]),
            doc_id: doc.doc_id.clone(),
            span,
            imports,
            name: shape.name.clone(),
            signature: shape.signature(source).to_string(),
            body: body.to_string(),
            docstring: shape.docstring.as_ref().map(|d| d.text.clone()),
            packages,
        };
        if !python::is_valid_module(&unit.source()) {
            stats.roundtrip_failures += 1;
            stats
                .diagnostics
                .push(format!("{}: `{}` does not re-parse standalone", doc.path, unit.name));
            continue;
        }
        units.push(unit);
    }
    stats.units += units.len();
    units
}

/// Imports whose bound name (or root package) occurs as an identifier in
/// `body`. Star imports are always kept.
pub(crate) fn slice_imports(bindings: &[ImportBinding], body: &str) -> Vec<ImportStatement> {
    let idents = python::identifiers(body);
    let mut seen = BTreeSet::new();
    bindings
        .iter()
        .filter(|b| {
            idents.contains(&b.root_package)
                || match &b.bound_names {
                    Some(names) => names.iter().any(|n| idents.contains(n)),
                    None => true,
                }
        })
        .filter(|b| seen.insert(b.text.clone()))
        .map(|b| ImportStatement {
            text: b.text.clone(),
            root_package: b.root_package.clone(),
        })
        .collect()
}

/// Parse a plain-text list: one entry per line, `#` starts a comment.
pub fn parse_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn read_list(path: &Path) -> Result<String, ListError> {
    std::fs::read_to_string(path).map_err(|e| ListError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageAllowlist {
    packages: BTreeSet<String>,
}

impl PackageAllowlist {
    pub fn new<I, S>(packages: I) -> Result<Self, ListError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let packages: BTreeSet<String> = packages.into_iter().map(Into::into).collect();
        if packages.is_empty() {
            return Err(ListError::EmptyAllowlist);
        }
        Ok(Self { packages })
    }

    pub fn from_text(text: &str) -> Result<Self, ListError> {
        Self::new(parse_list(text))
    }

    pub fn load(path: &Path) -> Result<Self, ListError> {
        Self::from_text(&read_list(path)?)
    }

    pub fn contains(&self, package: &str) -> bool {
        self.packages.contains(package)
    }

    pub fn packages(&self) -> &BTreeSet<String> {
        &self.packages
    }
}

/// Keep units that import at least one allowlisted package.
pub fn filter_by_packages(units: Vec<FunctionUnit>, allowlist: &PackageAllowlist) -> Vec<FunctionUnit> {
    units
        .into_iter()
        .filter(|u| u.packages.iter().any(|p| allowlist.contains(p)))
        .collect()
}

/// Regex patterns for constructs that must never reach the sandbox.
#[derive(Debug, Clone)]
pub struct Denylist {
    patterns: Vec<(String, Regex)>,
}

impl Denylist {
    pub fn new<I, S>(patterns: I) -> Result<Self, ListError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let patterns = patterns
            .into_iter()
            .map(|p| {
                let p = p.into();
                Regex::new(&format!("(?m){p}"))
                    .map(|re| (p.clone(), re))
                    .map_err(|source| ListError::BadPattern { pattern: p, source })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns })
    }

    pub fn from_text(text: &str) -> Result<Self, ListError> {
        Self::new(parse_list(text))
    }

    pub fn load(path: &Path) -> Result<Self, ListError> {
        Self::from_text(&read_list(path)?)
    }

    /// First pattern matching `source`, if any.
    pub fn matches(&self, source: &str) -> Option<&str> {
        self.patterns
            .iter()
            .find(|(_, re)| re.is_match(source))
            .map(|(p, _)| p.as_str())
    }
}

impl Default for Denylist {
    fn default() -> Self {
        Self::from_text(DEFAULT_DENYLIST).expect("shipped denylist compiles")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenStats {
    pub kept: usize,
    pub dropped: usize,
    pub dropped_by_pattern: BTreeMap<String, usize>,
}

/// Drop units whose standalone source matches any denylist pattern. The
/// survivors are the safe set fed to the improvement loop.
pub fn safety_screen(
    units: Vec<FunctionUnit>,
    denylist: &Denylist,
    stats: &mut ScreenStats,
) -> Vec<FunctionUnit> {
    units
        .into_iter()
        .filter(|u| match denylist.matches(&u.source()) {
            Some(pattern) => {
                stats.dropped += 1;
                *stats.dropped_by_pattern.entry(pattern.to_string()).or_default() += 1;
                false
            }
            None => {
                stats.kept += 1;
                true
            }
        })
        .collect()
}
