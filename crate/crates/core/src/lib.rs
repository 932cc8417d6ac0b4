//! Unit-test-guided synthesis of verified code training data.
//!
//! The pipeline turns a raw Python corpus into prefix/completion training
//! pairs whose implementations have been validated against generated unit
//! tests:
//!
//! 1. [`corpus`] streams documents, drops exact duplicates and documents that
//!    share a verbatim token shingle with benchmark text.
//! 2. [`extract`] slices top-level functions out of each document together
//!    with the imports they use, then applies the package allowlist and the
//!    safety denylist.
//! 3. [`improve`] asks the test-generator role for a `TestCases` suite per
//!    function, executes every pair, and repairs failing functions with the
//!    bug-fix role for a bounded number of rounds.
//! 4. [`refine`] documents passing functions and re-verifies them.
//! 5. [`dataset`] splits refined functions into training pairs and exports
//!    them with a manifest and package statistics.
//!
//! Model access goes through [`gateway`]; execution goes through
//! [`orchestrator`], which speaks the sandbox worker protocol defined in
//! [`sandbox`].

pub mod config;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod extract;
pub mod gateway;
pub mod hash;
pub mod improve;
pub mod jsonl;
pub mod orchestrator;
pub mod pipeline;
pub mod python;
pub mod refine;
pub mod sandbox;

pub use corpus::SourceDocument;
pub use extract::{FunctionUnit, ImportStatement};
pub use improve::{Candidate, CandidateStatus, PartitionState, UnitTestSuite};
pub use orchestrator::ExecutionResult;
pub use sandbox::{Outcome, RunnerJob, Verdict};
