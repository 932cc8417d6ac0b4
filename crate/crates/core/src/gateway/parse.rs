use rustpython_parser::ast::Stmt;
use serde::{Deserialize, Serialize};

use crate::hash::short_id;
use crate::improve::UnitTestSuite;
use crate::python;

/// Name of the test class every generated suite must define.
pub const TEST_CLASS: &str = "TestCases";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    pub code: String,
    /// False when no complete fence was found and the text was taken as is.
    pub confident: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("empty response")]
pub struct EmptyResponse;

/// Contents of the first fenced code block in a model reply. Without a
/// fence the whole trimmed reply is returned, flagged low-confidence.
pub fn extract_code_block(text: &str) -> Result<CodeBlock, EmptyResponse> {
    let block = match text.find("```") {
        Some(open) => {
            let after = &text[open + 3..];
            let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
            let rest = &after[body_start..];
            match rest.find("```") {
                Some(close) => CodeBlock {
                    code: rest[..close].trim_end().to_string(),
                    confident: true,
                },
                None => CodeBlock {
                    code: rest.trim_end().to_string(),
                    confident: false,
                },
            }
        }
        None => CodeBlock {
            code: text.trim().to_string(),
            confident: false,
        },
    };
    if block.code.trim().is_empty() {
        Err(EmptyResponse)
    } else {
        Ok(block)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    EmptyResponse,
    SyntaxError,
    ClassName,
    NoTests,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("test suite rejected ({reason:?}): {detail}")]
pub struct SuiteRejection {
    pub reason: RejectionReason,
    pub detail: String,
}

impl SuiteRejection {
    fn new(reason: RejectionReason, detail: impl Into<String>) -> Self {
        Self {
            reason,
            detail: detail.into(),
        }
    }
}

/// Accept `source` iff it parses and defines exactly one top-level class
/// named `TestCases` with at least one `test_*` method.
pub fn validate_test_suite(candidate_id: &str, source: &str) -> Result<UnitTestSuite, SuiteRejection> {
    let stmts = python::parse_module(source)
        .map_err(|e| SuiteRejection::new(RejectionReason::SyntaxError, e.to_string()))?;
    let classes: Vec<_> = stmts
        .iter()
        .filter_map(|s| match s {
            Stmt::ClassDef(c) if c.name.as_str() == TEST_CLASS => Some(c),
            _ => None,
        })
        .collect();
    let class = match classes.as_slice() {
        [one] => *one,
        [] => {
            return Err(SuiteRejection::new(
                RejectionReason::ClassName,
                format!("no class named {TEST_CLASS}"),
            ))
        }
        many => {
            return Err(SuiteRejection::new(
                RejectionReason::ClassName,
                format!("{} classes named {TEST_CLASS}", many.len()),
            ))
        }
    };
    let test_method_names: Vec<String> = class
        .body
        .iter()
        .filter_map(|s| match s {
            Stmt::FunctionDef(f) => Some(f.name.to_string()),
            Stmt::AsyncFunctionDef(f) => Some(f.name.to_string()),
            _ => None,
        })
        .filter(|n| n.starts_with("test_"))
        .collect();
    if test_method_names.is_empty() {
        return Err(SuiteRejection::new(
            RejectionReason::NoTests,
            format!("{TEST_CLASS} has no test_ methods"),
        ));
    }
    Ok(UnitTestSuite {
        suite_id: short_id(&[candidate_id, source]),
        candidate_id: candidate_id.to_string(),
        source: source.to_string(),
        test_method_names,
    })
}

/// Extract the code block from a reply and validate it as a suite.
pub fn suite_from_reply(candidate_id: &str, reply: &str) -> Result<UnitTestSuite, SuiteRejection> {
    let block = extract_code_block(reply)
        .map_err(|_| SuiteRejection::new(RejectionReason::EmptyResponse, "empty reply"))?;
    validate_test_suite(candidate_id, &block.code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DRAW_WEIGHTS_TEST: &str = include_str!("../../tests/fixtures/draw_weights_test.py");

    #[test]
    fn plain_fence() {
        let b = extract_code_block("```python\nX\n```").unwrap();
        assert_eq!(b.code, "X");
        assert!(b.confident);
    }

    #[test]
    fn prose_around_fence() {
        let text = "Here is the fix:\n```python\ndef f():\n    return 2\n```\nThis works because...";
        assert_eq!(extract_code_block(text).unwrap().code, "def f():\n    return 2");
    }

    #[test]
    fn first_of_two_fences() {
        let text = "```\nfirst\n```\nand\n```python\nsecond\n```";
        assert_eq!(extract_code_block(text).unwrap().code, "first");
    }

    #[test]
    fn no_fence_is_low_confidence() {
        let b = extract_code_block("  def f(): pass \n").unwrap();
        assert_eq!(b.code, "def f(): pass");
        assert!(!b.confident);
        assert_eq!(extract_code_block("   \n"), Err(EmptyResponse));
        assert_eq!(extract_code_block("```python\n```"), Err(EmptyResponse));
    }

    #[test]
    fn load_data_suite_is_accepted() {
        let suite = validate_test_suite("c", DRAW_WEIGHTS_TEST).unwrap();
        assert_eq!(
            suite.test_method_names,
            vec![
                "test_lognormal_weights",
                "test_normal_weights",
                "test_uniform_weights",
                "test_invalid_size",
                "test_invalid_distribution"
            ]
        );
    }

    #[test]
    fn wrong_class_name() {
        let src = "import unittest\nclass MyTests(unittest.TestCase):\n    def test_a(self):\n        pass\n";
        assert_eq!(validate_test_suite("c", src).unwrap_err().reason, RejectionReason::ClassName);
    }

    #[test]
    fn no_test_methods() {
        let src = "import unittest\nclass TestCases(unittest.TestCase):\n    def setUp(self):\n        pass\n    def helper(self):\n        pass\n";
        assert_eq!(validate_test_suite("c", src).unwrap_err().reason, RejectionReason::NoTests);
    }

    #[test]
    fn syntax_error_and_duplicates() {
        let bad = "class TestCases(:\n";
        assert_eq!(validate_test_suite("c", bad).unwrap_err().reason, RejectionReason::SyntaxError);
        let dup = "class TestCases:\n    def test_a(self): pass\nclass TestCases:\n    def test_b(self): pass\n";
        assert_eq!(validate_test_suite("c", dup).unwrap_err().reason, RejectionReason::ClassName);
    }

    proptest! {
        #[test]
        fn never_accepts_unparseable_source(src in "[a-zA-Z_():= \n]{0,60}") {
            if validate_test_suite("c", &src).is_ok() {
                prop_assert!(python::is_valid_module(&src));
            }
        }

        #[test]
        fn broken_suites_are_rejected(cut in 1usize..40) {
            // Truncating the suite inside its header always breaks it.
            let head = &DRAW_WEIGHTS_TEST[..DRAW_WEIGHTS_TEST.find("TestCases(").unwrap() + 10];
            let src = &head[..head.len().saturating_sub(cut % 10)];
            prop_assert!(validate_test_suite("c", src).is_err());
        }
    }
}
