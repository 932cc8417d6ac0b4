//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits non-zero if any check fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use unitsynth::config::PipelineConfig;
use unitsynth::corpus::{decontaminate, Blocklist, DecontaminationStats, SourceDocument};
use unitsynth::dataset::{TrainingPair, DATASET_FILE, MANIFEST_FILE};
use unitsynth::eval::{EvalItem, GeneratorEval};
use unitsynth::extract::{extract_functions, ExtractOptions, ExtractStats};
use unitsynth::gateway::{Gateway, MockProvider, RoleId, ScriptEntry};
use unitsynth::improve::{CandidateStatus, ImprovementLoop, LoopState};
use unitsynth::orchestrator::{ExecutionPolicy, Orchestrator, StubExecutor};
use unitsynth::pipeline::{file_sha256, Pipeline, RunOptions, Stage, RUN_MANIFEST_FILE};
use unitsynth::python;
use unitsynth::sandbox::{to_wire_string, Outcome};
use unitsynth::{FunctionUnit, Verdict};

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fence(code: &str) -> String {
    format!("```python\n{code}```")
}

fn suite_for(name: &str) -> String {
    fence(&format!(
        "import unittest\n\n\nclass TestCases(unittest.TestCase):\n    def test_{name}(self):\n        self.assertIsNotNone({name}(1))\n"
    ))
}

fn stub_orchestrator(f: impl Fn(&str) -> Verdict + Send + Sync + 'static) -> Orchestrator {
    Orchestrator::new(
        Arc::new(StubExecutor::from_fn(move |job, _| f(&job.function_source))),
        ExecutionPolicy {
            flake_retries: 1,
            parallelism: 4,
            ..ExecutionPolicy::default()
        },
    )
}

fn marker_orchestrator() -> Orchestrator {
    stub_orchestrator(|src| {
        if src.contains("'PASS'") {
            Verdict::new(Outcome::Pass)
        } else {
            Verdict::new(Outcome::fail([("test_x", "Traceback (most recent call last):\nAssertionError\n")]))
        }
    })
}

fn units_of(path: &str, src: &str) -> Vec<FunctionUnit> {
    let doc = SourceDocument::new(path, src);
    extract_functions(&doc, &ExtractOptions::default(), &mut ExtractStats::default())
}

fn revision(name: &str, marker: &str) -> String {
    fence(&format!("import math\n\n\ndef {name}(x):\n    return math.floor(x), '{marker}'\n"))
}

fn check_partition(state: &LoopState, admitted: usize, prev_pass: &mut usize) -> Check {
    let p = &state.partition;
    ensure!(p.is_disjoint(), "round {}: sets overlap", p.round);
    ensure!(
        p.d_pass.len() + p.d_curr.len() + p.d_skipped.len() == admitted,
        "round {}: {} + {} + {} != {admitted}",
        p.round,
        p.d_pass.len(),
        p.d_curr.len(),
        p.d_skipped.len()
    );
    ensure!(p.d_pass.len() >= *prev_pass, "round {}: d_pass shrank", p.round);
    *prev_pass = p.d_pass.len();
    Ok(())
}

/// 50 functions over 10 documents. By index mod 6: pass at round 0, 1, 2,
/// never, suite rejected twice, no scripted suite (provider error).
fn partition_conservation() -> Check {
    let start = Instant::now();
    let mut units = Vec::new();
    for d in 0..10 {
        let mut src = String::from("import math\n");
        for k in 0..5 {
            let i = d * 5 + k;
            let body = if i % 6 == 0 { "math.floor(x), 'PASS'" } else { "math.floor(x)" };
            src.push_str(&format!("\n\ndef f{i}(x):\n    return {body}\n"));
        }
        units.extend(units_of(&format!("pkg/m{d}.py"), &src));
    }
    ensure!(units.len() == 50, "fixture has {} units", units.len());

    let mut script = Vec::new();
    for u in &units {
        let i: usize = u.name[1..].parse().unwrap();
        let id = &u.unit_id;
        match i % 6 {
            4 => {
                script.push(ScriptEntry::new(RoleId::TestGenerator, id, 0, "no code here"));
                script.push(ScriptEntry::new(RoleId::TestGenerator, id, 0, "still nothing").on_attempt(2));
            }
            5 => {}
            _ => script.push(ScriptEntry::new(RoleId::TestGenerator, id, 0, suite_for(&u.name))),
        }
        for round in 1..=3 {
            let pass_at = match i % 6 {
                1 => 1,
                2 => 2,
                _ => 99,
            };
            let marker = if round >= pass_at { "PASS" } else { "WIP" };
            script.push(ScriptEntry::new(RoleId::BugFixer, id, round, revision(&u.name, marker)));
        }
    }
    let gw = Gateway::single(Arc::new(MockProvider::new(script)));
    let orch = marker_orchestrator();
    let lp = ImprovementLoop::new(&gw, &orch, 3);
    let candidates = lp.generate_suites(&units, Vec::new()).map_err(|(_, e)| e.to_string())?;
    let mut state = lp.initialize(candidates).map_err(|e| e.to_string())?;
    let admitted = state.partition.admitted();
    ensure!(admitted == 50, "admitted {admitted}");
    let mut prev = 0;
    check_partition(&state, admitted, &mut prev)?;
    while !state.finished {
        lp.repair_round(&mut state).map_err(|e| e.to_string())?;
        check_partition(&state, admitted, &mut prev)?;
    }
    let expected_pass = (0..50).filter(|i| i % 6 <= 2).count();
    let expected_skip = (0..50).filter(|i| i % 6 >= 4).count();
    ensure!(state.partition.d_pass.len() == expected_pass, "d_pass {}", state.partition.d_pass.len());
    ensure!(state.partition.d_skipped.len() == expected_skip, "d_skipped {}", state.partition.d_skipped.len());
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(())
}

fn schedule_fidelity() -> Check {
    let src = "import math\n\n\ndef a(x):\n    return math.floor(x), 'PASS'\n\n\ndef b(x):\n    return math.floor(x)\n\n\ndef c(x):\n    return math.floor(x)\n\n\ndef d(x):\n    return math.floor(x)\n";
    let units = units_of("sched.py", src);
    let id = |n: &str| units.iter().find(|u| u.name == n).unwrap().unit_id.clone();
    let mut script: Vec<ScriptEntry> = units
        .iter()
        .map(|u| ScriptEntry::new(RoleId::TestGenerator, &u.unit_id, 0, suite_for(&u.name)))
        .collect();
    script.push(ScriptEntry::new(RoleId::BugFixer, id("b"), 1, revision("b", "PASS")));
    script.push(ScriptEntry::new(RoleId::BugFixer, id("c"), 1, revision("c", "WIP")));
    script.push(ScriptEntry::new(RoleId::BugFixer, id("c"), 2, revision("c", "PASS")));
    for r in 1..=3 {
        script.push(ScriptEntry::new(RoleId::BugFixer, id("d"), r, revision("d", "WIP")));
    }
    let gw = Gateway::single(Arc::new(MockProvider::new(script)));
    let orch = marker_orchestrator();
    let state = ImprovementLoop::new(&gw, &orch, 3)
        .run_to_completion(&units)
        .map_err(|e| e.to_string())?;
    for (name, round) in [("a", 0), ("b", 1), ("c", 2)] {
        let c = &state.candidates[&id(name)];
        ensure!(state.partition.d_pass.contains(&id(name)), "{name} not in d_pass");
        ensure!(c.round == round, "{name} passed at round {}, expected {round}", c.round);
    }
    let d = &state.candidates[&id("d")];
    ensure!(d.status == CandidateStatus::Exhausted, "d is {:?}", d.status);
    ensure!(d.history.len() == 4, "d has {} history entries", d.history.len());
    ensure!(state.pass_counts() == vec![1, 1, 1, 0], "pass counts {:?}", state.pass_counts());
    Ok(())
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn wire_format() -> Check {
    let pass = to_wire_string(&Outcome::Pass);
    ensure!(pass == r#"["pass", {}]"#, "pass serialized as {pass}");
    let golden = std::fs::read_to_string(fixture("debug_verdict.json")).map_err(|e| e.to_string())?;
    let parsed: Outcome = serde_json::from_str(&golden).map_err(|e| e.to_string())?;
    let Outcome::Fail(map) = &parsed else {
        return Err(format!("fixture parsed as {parsed:?}"));
    };
    ensure!(map.len() == 2, "expected two failing tests, got {}", map.len());
    ensure!(
        map.values().all(|tb| tb.starts_with("Traceback (most recent call last):\n")),
        "tracebacks lost their header"
    );
    let wire = to_wire_string(&parsed);
    let back: serde_json::Value = serde_json::from_str(&wire).map_err(|e| e.to_string())?;
    let expected: serde_json::Value = serde_json::from_str(&golden).unwrap();
    ensure!(back == expected, "fail verdict does not round-trip");
    ensure!(wire.starts_with(r#"["fail", {"test_"#), "fail wire form {wire}");
    Ok(())
}

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/demo.toml")
}

fn run_demo(out: &Path, resume: bool, stop_after: Option<Stage>) -> Result<(), String> {
    let config = PipelineConfig::load(&demo_config()).map_err(|e| e.to_string())?;
    let p = Pipeline::open(
        config,
        RunOptions {
            resume,
            output_dir: Some(out.to_path_buf()),
            parallelism: Some(3),
            mock_script: None,
        },
    )
    .map_err(|e| e.to_string())?;
    p.run_all(stop_after).map_err(|e| e.to_string())?;
    Ok(())
}

fn pair_reconstruction() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_demo(dir.path(), false, None)?;
    let text = std::fs::read_to_string(dir.path().join(DATASET_FILE)).map_err(|e| e.to_string())?;
    let pairs: Vec<TrainingPair> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(!pairs.is_empty(), "golden run exported no pairs");
    for p in &pairs {
        let whole = format!("{}{}", p.prefix, p.completion);
        let stmts = python::parse_module(&whole).map_err(|e| format!("{}: {e}", p.pair_id))?;
        let (last, imports) = stmts.split_last().ok_or("empty module")?;
        ensure!(
            imports.iter().all(|s| s.is_import_stmt() || s.is_import_from_stmt()),
            "{}: statements other than imports before the function",
            p.pair_id
        );
        ensure!(last.is_function_def_stmt(), "{}: last statement is not a function", p.pair_id);
        ensure!(p.prefix.ends_with("\"\"\"") || p.prefix.ends_with("'''"), "{}: prefix ends {:?}", p.pair_id, &p.prefix[p.prefix.len().saturating_sub(10)..]);
        let has_import = p
            .completion
            .lines()
            .any(|l| matches!(l.split_whitespace().next(), Some("import" | "from")));
        ensure!(!has_import, "{}: completion imports", p.pair_id);
    }
    Ok(())
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_demo(a.path(), false, None)?;
    run_demo(b.path(), false, None)?;
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"));
    for f in [DATASET_FILE, MANIFEST_FILE, RUN_MANIFEST_FILE] {
        ensure!(read(a.path(), f)? == read(b.path(), f)?, "{f} differs between runs");
    }
    let reference = file_sha256(&b.path().join(RUN_MANIFEST_FILE)).map_err(|e| e.to_string())?;
    for stop in [Stage::Ingest, Stage::GenTests, Stage::Execute, Stage::Refine] {
        let c = tempfile::tempdir().map_err(|e| e.to_string())?;
        run_demo(c.path(), false, Some(stop))?;
        ensure!(!c.path().join(RUN_MANIFEST_FILE).exists(), "manifest written after stop at {stop}");
        run_demo(c.path(), true, None)?;
        let got = file_sha256(&c.path().join(RUN_MANIFEST_FILE)).map_err(|e| e.to_string())?;
        ensure!(got == reference, "resume after {stop} gives manifest {got}, expected {reference}");
        ensure!(read(c.path(), DATASET_FILE)? == read(a.path(), DATASET_FILE)?, "dataset differs after resume from {stop}");
    }
    Ok(())
}

fn decontamination() -> Check {
    let item = "def add ( a , b ) : return a + b ; print ( add ( 1 , 2 ) )";
    let mut bl = Blocklist::new(13).map_err(|e| e.to_string())?;
    bl.add_item("bench", item);
    let tokens: Vec<&str> = item.split_whitespace().collect();
    let with13 = format!("x = 0\n{}\ny = 1\n", tokens[..13].join(" "));
    let with12 = format!("x = 0\n{}\ny = 1\n", tokens[..12].join(" "));
    let docs = vec![SourceDocument::new("thirteen.py", with13), SourceDocument::new("twelve.py", with12)];
    let mut stats = DecontaminationStats::default();
    let kept: Vec<String> = decontaminate(docs, &bl, &mut stats).map(|d| d.path).collect();
    ensure!(kept == vec!["twelve.py".to_string()], "kept {kept:?}");
    ensure!(stats.dropped == 1, "dropped {}", stats.dropped);
    Ok(())
}

fn eval_items(n: usize) -> Vec<EvalItem> {
    (0..n)
        .map(|i| EvalItem {
            item_id: format!("task/{i}"),
            imports: vec!["import math".into()],
            solution: format!("def g{i}(x):\n    return math.floor(x) + {i}\n"),
        })
        .collect()
}

fn eval_gateway(items: &[EvalItem]) -> Gateway {
    let script = items
        .iter()
        .enumerate()
        .map(|(i, it)| ScriptEntry::new(RoleId::TestGenerator, &it.item_id, 0, suite_for(&format!("g{i}"))));
    Gateway::single(Arc::new(MockProvider::new(script)))
}

fn eval_arithmetic() -> Check {
    let items = eval_items(5);
    let gw = eval_gateway(&items);
    let orch = stub_orchestrator(|src| {
        if src.contains("+ 3\n") {
            Verdict::new(Outcome::fail([("test_g3", "AssertionError")]))
        } else {
            Verdict::new(Outcome::Pass)
        }
    });
    let rep = GeneratorEval::new(&gw, &orch).evaluate(&items).map_err(|e| e.to_string())?;
    ensure!(rep.evaluated == 5 && rep.passes == 4, "{} of {}", rep.passes, rep.evaluated);
    ensure!(rep.accuracy == Some(0.8), "accuracy {:?}", rep.accuracy);
    ensure!(format!("{:.3}", rep.accuracy.unwrap()) == "0.800", "formatted accuracy");

    // Lines covered / lines in body: 3/4, 1/2, 5/5.
    let items = eval_items(3);
    let gw = eval_gateway(&items);
    let covered: BTreeMap<&str, f64> = BTreeMap::from([("+ 0\n", 3.0 / 4.0), ("+ 1\n", 1.0 / 2.0), ("+ 2\n", 5.0 / 5.0)]);
    let orch = stub_orchestrator(move |src| {
        let c = covered.iter().find(|(k, _)| src.contains(*k)).map(|(_, v)| *v).unwrap();
        Verdict::new(Outcome::Pass).with_coverage(c)
    });
    let rep = GeneratorEval::new(&gw, &orch).evaluate(&items).map_err(|e| e.to_string())?;
    ensure!(rep.mean_coverage == Some(0.75), "mean coverage {:?}", rep.mean_coverage);
    Ok(())
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 7] = [
        ("partition conservation over 50 functions", partition_conservation),
        ("repair schedule fidelity", schedule_fidelity),
        ("verdict wire format", wire_format),
        ("training pair reconstruction", pair_reconstruction),
        ("determinism and resume", determinism),
        ("decontamination at 13 vs 12 tokens", decontamination),
        ("generator eval arithmetic", eval_arithmetic),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
