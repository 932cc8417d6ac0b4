//! Sandbox worker protocol: the job sent to a worker and the verdict it
//! returns.
//!
//! A worker reads one [`RunnerJob`] as JSON on stdin and writes one
//! [`WorkerResponse`] on stdout:
//!
//! ```text
//! {"job_id": "...", "result": ["pass", {}], "coverage": 1.0, "wall_time": 0.41}
//! ```
//!
//! `result` is the bracketed verdict form: `["pass", {}]`,
//! `["fail", {"test_name": "<traceback>", ...}]` or
//! `["error", {"kind": "timeout", "detail": "..."}]`. [`to_wire_string`]
//! renders it byte-compatibly with Python's `json.dumps` defaults, which is
//! also the form shown to the bug-fix role.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerJob {
    pub job_id: String,
    pub function_source: String,
    pub test_source: String,
    pub timeout_seconds: f64,
    pub measure_coverage: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Timeout,
    ImportMissing,
    CollectionError,
    Crash,
    /// Synthetic: a revised function did not parse, so nothing was executed.
    ParseFailure,
    /// Synthetic: the model provider failed before a revision was produced.
    ProviderError,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Timeout => "timeout",
            Self::ImportMissing => "import_missing",
            Self::CollectionError => "collection_error",
            Self::Crash => "crash",
            Self::ParseFailure => "parse_failure",
            Self::ProviderError => "provider_error",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "timeout" => Self::Timeout,
            "import_missing" => Self::ImportMissing,
            "collection_error" => Self::CollectionError,
            "crash" => Self::Crash,
            "parse_failure" => Self::ParseFailure,
            "provider_error" => Self::ProviderError,
            _ => return None,
        })
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Error,
}

/// Result of running a test class against a function. A failing outcome
/// always names at least one failing test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail(BTreeMap<String, String>),
    Error { kind: ErrorKind, detail: String },
}

impl Outcome {
    pub fn status(&self) -> Status {
        match self {
            Self::Pass => Status::Pass,
            Self::Fail(_) => Status::Fail,
            Self::Error { .. } => Status::Error,
        }
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, Self::Pass)
    }

    pub fn error_kind(&self) -> Option<ErrorKind> {
        match self {
            Self::Error { kind, .. } => Some(*kind),
            _ => None,
        }
    }

    pub fn fail<I, K, V>(failures: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let map: BTreeMap<String, String> = failures
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect();
        assert!(!map.is_empty(), "a failing outcome names at least one test");
        Self::Fail(map)
    }

    pub fn error(kind: ErrorKind, detail: impl Into<String>) -> Self {
        Self::Error {
            kind,
            detail: detail.into(),
        }
    }
}

impl Serialize for Outcome {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tup = serializer.serialize_tuple(2)?;
        match self {
            Self::Pass => {
                tup.serialize_element("pass")?;
                tup.serialize_element(&BTreeMap::<String, String>::new())?;
            }
            Self::Fail(failures) => {
                tup.serialize_element("fail")?;
                tup.serialize_element(failures)?;
            }
            Self::Error { kind, detail } => {
                tup.serialize_element("error")?;
                #[derive(Serialize)]
                struct Payload<'a> {
                    kind: &'a str,
                    detail: &'a str,
                }
                tup.serialize_element(&Payload {
                    kind: kind.as_str(),
                    detail,
                })?;
            }
        }
        tup.end()
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        let arr = value
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| de::Error::custom("verdict must be a two-element array"))?;
        let tag = arr[0]
            .as_str()
            .ok_or_else(|| de::Error::custom("verdict tag must be a string"))?;
        let payload = arr[1]
            .as_object()
            .ok_or_else(|| de::Error::custom("verdict payload must be an object"))?;
        match tag {
            "pass" => Ok(Self::Pass),
            "fail" => {
                if payload.is_empty() {
                    return Err(de::Error::custom("fail verdict without failing tests"));
                }
                let mut failures = BTreeMap::new();
                for (name, tb) in payload {
                    let tb = tb
                        .as_str()
                        .ok_or_else(|| de::Error::custom("traceback must be a string"))?;
                    failures.insert(name.clone(), tb.to_string());
                }
                Ok(Self::Fail(failures))
            }
            "error" => {
                let kind = payload
                    .get("kind")
                    .and_then(Value::as_str)
                    .and_then(ErrorKind::parse)
                    .ok_or_else(|| de::Error::custom("unknown or missing error kind"))?;
                let detail = payload
                    .get("detail")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string();
                Ok(Self::Error { kind, detail })
            }
            other => Err(de::Error::custom(format!("unknown verdict tag `{other}`"))),
        }
    }
}

/// Outcome plus the measurements that came with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub result: Outcome,
    pub coverage: Option<f64>,
    pub wall_time: f64,
}

impl Verdict {
    pub fn new(result: Outcome) -> Self {
        Self {
            result,
            coverage: None,
            wall_time: 0.0,
        }
    }

    pub fn with_coverage(mut self, coverage: f64) -> Self {
        self.coverage = Some(coverage);
        self
    }
}

/// The object a worker prints on stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub job_id: String,
    pub result: Outcome,
    pub coverage: Option<f64>,
    pub wall_time: f64,
}

impl WorkerResponse {
    pub fn into_verdict(self) -> Verdict {
        Verdict {
            result: self.result,
            coverage: self.coverage.map(|c| c.clamp(0.0, 1.0)),
            wall_time: self.wall_time,
        }
    }
}

/// Render any serializable value with Python `json.dumps` default
/// formatting: `", "` and `": "` separators and ASCII-only output.
pub fn to_python_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, PythonFormatter);
    value
        .serialize(&mut ser)
        .expect("serializing to memory cannot fail");
    String::from_utf8(out).expect("formatter emits ASCII")
}

/// The bracketed verdict form, e.g. `["pass", {}]`.
pub fn to_wire_string(outcome: &Outcome) -> String {
    to_python_json(outcome)
}

struct PythonFormatter;

impl serde_json::ser::Formatter for PythonFormatter {
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        w.write_all(b": ")
    }

    fn write_string_fragment<W: ?Sized + io::Write>(&mut self, w: &mut W, fragment: &str) -> io::Result<()> {
        let mut units = [0u16; 2];
        for c in fragment.chars() {
            if c.is_ascii() && c != '\x7f' {
                w.write_all(&[c as u8])?;
            } else {
                for unit in c.encode_utf16(&mut units) {
                    write!(w, "\\u{unit:04x}")?;
                }
            }
        }
        Ok(())
    }
}
