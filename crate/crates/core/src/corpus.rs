//! Corpus ingestion, exact deduplication and benchmark decontamination.
//!
//! All three stages are iterator adapters so a corpus never has to be held in
//! memory. Counters live in caller-owned stats structs that the adapters
//! borrow mutably; read them once the stream has been drained.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hash::sha256_hex;

/// Default shingle length in whitespace tokens.
pub const DEFAULT_SHINGLE_LEN: usize = 13;
pub const MIN_SHINGLE_LEN: usize = 8;
pub const DEFAULT_LANGUAGE: &str = "python";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported corpus format `{0}`")]
    UnsupportedFormat(String),
    #[error("shingle length {0} is below the minimum of {MIN_SHINGLE_LEN}")]
    ShingleTooShort(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub path: String,
    pub content: String,
    pub language_tag: String,
}

impl SourceDocument {
    pub fn new(path: impl Into<String>, content: impl Into<String>) -> Self {
        let content = content.into();
        Self {
            doc_id: sha256_hex(&content),
            path: path.into(),
            content,
            language_tag: DEFAULT_LANGUAGE.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            other => Err(CorpusError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records: usize,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub diagnostics: Vec<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    path: String,
    content: String,
    #[serde(default)]
    language: Option<String>,
}

/// Open a corpus for streaming. Unreadable sources fail here; malformed
/// records are skipped later and counted in `stats`.
pub fn ingest<'a>(
    source: &Path,
    format: CorpusFormat,
    stats: &'a mut IngestStats,
) -> Result<impl Iterator<Item = SourceDocument> + 'a, CorpusError> {
    let CorpusFormat::Jsonl = format;
    let file = File::open(source).map_err(|e| CorpusError::Io {
        path: source.to_path_buf(),
        source: e,
    })?;
    Ok(JsonlDocuments {
        reader: BufReader::new(file),
        line_no: 0,
        stats,
        buf: Vec::new(),
    })
}

struct JsonlDocuments<'a, R> {
    reader: R,
    line_no: usize,
    stats: &'a mut IngestStats,
    buf: Vec<u8>,
}

impl<R: BufRead> Iterator for JsonlDocuments<'_, R> {
    type Item = SourceDocument;

    fn next(&mut self) -> Option<SourceDocument> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    // A mid-stream read failure ends the stream; count it so
                    // it is visible in the run report.
                    self.stats.skipped += 1;
                    self.stats
                        .diagnostics
                        .push(format!("line {}: read error: {e}", self.line_no + 1));
                    return None;
                }
            }
            self.line_no += 1;
            let Ok(line) = std::str::from_utf8(&self.buf) else {
                self.skip("invalid UTF-8");
                continue;
            };
            if line.trim().is_empty() {
                continue;
            }
            self.stats.records += 1;
            match serde_json::from_str::<RawRecord>(line) {
                Ok(raw) => {
                    let mut doc = SourceDocument::new(raw.path, raw.content);
                    if let Some(lang) = raw.language {
                        doc.language_tag = lang;
                    }
                    return Some(doc);
                }
                Err(e) => self.skip(&e.to_string()),
            }
        }
    }
}

impl<R> JsonlDocuments<'_, R> {
    fn skip(&mut self, why: &str) {
        self.stats.skipped += 1;
        self.stats
            .diagnostics
            .push(format!("line {}: {why}", self.line_no));
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStats {
    pub kept: usize,
    pub duplicates: usize,
}

/// Keep the first document for each `doc_id`, preserving order.
pub fn dedup_exact<'a, I>(docs: I, stats: &'a mut DedupStats) -> impl Iterator<Item = SourceDocument> + 'a
where
    I: IntoIterator<Item = SourceDocument>,
    I::IntoIter: 'a,
{
    let mut seen = HashSet::new();
    docs.into_iter().filter(move |doc| {
        if seen.insert(doc.doc_id.clone()) {
            stats.kept += 1;
            true
        } else {
            stats.duplicates += 1;
            false
        }
    })
}

/// Sharded variant: each shard is deduplicated on its own (the parallel
/// step), then a global pass over the concatenated survivors removes
/// cross-shard repeats. The output equals `dedup_exact` over the
/// concatenation of the shards.
pub fn dedup_sharded(shards: Vec<Vec<SourceDocument>>) -> (Vec<SourceDocument>, DedupStats) {
    use rayon::prelude::*;
    let per_shard: Vec<(Vec<SourceDocument>, usize)> = shards
        .into_par_iter()
        .map(|shard| {
            let mut stats = DedupStats::default();
            let kept: Vec<_> = dedup_exact(shard, &mut stats).collect();
            (kept, stats.duplicates)
        })
        .collect();
    let local_dups: usize = per_shard.iter().map(|(_, d)| d).sum();
    let mut stats = DedupStats::default();
    let merged: Vec<_> = dedup_exact(per_shard.into_iter().flat_map(|(k, _)| k), &mut stats).collect();
    stats.duplicates += local_dups;
    (merged, stats)
}

/// Token shingles of benchmark text that must not appear in the corpus.
#[derive(Debug, Clone, Default)]
pub struct Blocklist {
    n: usize,
    /// Shingle → index into `source_names` of the first benchmark that produced it.
    shingles: HashMap<String, usize>,
    source_names: Vec<String>,
}

impl Blocklist {
    pub fn new(n: usize) -> Result<Self, CorpusError> {
        if n < MIN_SHINGLE_LEN {
            return Err(CorpusError::ShingleTooShort(n));
        }
        Ok(Self {
            n,
            ..Self::default()
        })
    }

    pub fn shingle_len(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.shingles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shingles.is_empty()
    }

    pub fn source_names(&self) -> &[String] {
        &self.source_names
    }

    /// Add every shingle of one benchmark item. Items shorter than the
    /// shingle length contribute nothing.
    pub fn add_item(&mut self, benchmark: &str, text: &str) {
        let idx = match self.source_names.iter().position(|s| s == benchmark) {
            Some(i) => i,
            None => {
                self.source_names.push(benchmark.to_string());
                self.source_names.len() - 1
            }
        };
        for shingle in shingles(text, self.n) {
            self.shingles.entry(shingle).or_insert(idx);
        }
    }

    /// Load a directory of plain-text benchmark items, one item per file.
    /// Files directly under `dir` are attributed to a benchmark named after
    /// the file stem; files in subdirectories to the top-level subdirectory.
    pub fn load_dir(dir: &Path, n: usize) -> Result<Self, CorpusError> {
        let mut blocklist = Self::new(n)?;
        let mut files = Vec::new();
        collect_files(dir, &mut files).map_err(|e| CorpusError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        files.sort();
        for file in files {
            let rel = file.strip_prefix(dir).unwrap_or(&file);
            let mut comps = rel.components();
            let first = comps.next().map(|c| c.as_os_str().to_string_lossy().into_owned());
            let name = if comps.next().is_some() {
                first.unwrap_or_default()
            } else {
                file.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            };
            let text = std::fs::read_to_string(&file).map_err(|e| CorpusError::Io {
                path: file.clone(),
                source: e,
            })?;
            blocklist.add_item(&name, &text);
        }
        Ok(blocklist)
    }

    /// Benchmark index of the first blocklisted shingle found in `text`.
    fn first_hit(&self, text: &str) -> Option<usize> {
        if self.shingles.is_empty() {
            return None;
        }
        shingles(text, self.n).find_map(|s| self.shingles.get(&s).copied())
    }

    pub fn is_contaminated(&self, text: &str) -> bool {
        self.first_hit(text).is_some()
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Whitespace-normalized `n`-token windows of `text`.
pub fn shingles(text: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let count = if n > 0 && tokens.len() >= n {
        tokens.len() - n + 1
    } else {
        0
    };
    (0..count).map(move |i| tokens[i..i + n].join(" "))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecontaminationStats {
    pub kept: usize,
    pub dropped: usize,
    pub dropped_by_benchmark: BTreeMap<String, usize>,
    /// Ids of dropped documents, for provenance checks downstream.
    pub dropped_doc_ids: Vec<String>,
}

/// Drop every document that shares at least one shingle with `blocklist`.
pub fn decontaminate<'a, I>(
    docs: I,
    blocklist: &'a Blocklist,
    stats: &'a mut DecontaminationStats,
) -> impl Iterator<Item = SourceDocument> + 'a
where
    I: IntoIterator<Item = SourceDocument>,
    I::IntoIter: 'a,
{
    docs.into_iter().filter(move |doc| match blocklist.first_hit(&doc.content) {
        Some(idx) => {
            stats.dropped += 1;
            *stats
                .dropped_by_benchmark
                .entry(blocklist.source_names[idx].clone())
                .or_default() += 1;
            stats.dropped_doc_ids.push(doc.doc_id.clone());
            false
        }
        None => {
            stats.kept += 1;
            true
        }
    })
}
