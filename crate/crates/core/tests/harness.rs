//! Compile / judge / time behavior of the evaluation harness on real
//! programs.

use std::path::Path;
use std::sync::Mutex;

use perfforge_core::evalbench::{
    compile, load_test_dir, measure_runtime, Aggregation, Comparison, CompileOutcome, EvalError, Harness, TestCase,
    TestStatus,
};
use perfforge_core::RunConfig;

/// Timed runs share the host; keep them from overlapping across tests.
static TIMING: Mutex<()> = Mutex::new(());

/// Relative error allowed on sleep-based timings; same bound as the
/// end-to-end speedup check.
const SLEEP_TOLERANCE: f64 = 0.15;

/// Sleeps for the number of milliseconds read from stdin.
const SLEEP_MS: &str = "#include <chrono>\n#include <cstdio>\n#include <thread>\nint main() { int ms = 0; if (std::scanf(\"%d\", &ms) != 1) return 1; std::this_thread::sleep_for(std::chrono::milliseconds(ms)); }\n";

fn source(name: &str) -> String {
    std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/fixtures/cpp")
            .join(name),
    )
    .unwrap()
}

fn case(id: &str, input: &str, expected: &str) -> TestCase {
    TestCase {
        id: id.into(),
        stdin_payload: input.as_bytes().to_vec(),
        expected_stdout: expected.as_bytes().to_vec(),
        comparison: Comparison::Exact,
    }
}

fn config() -> RunConfig {
    RunConfig {
        repetitions: 1,
        warmups: 0,
        per_test_time_limit_seconds: 2.0,
        runtime_quantum_seconds: 0.05,
        workers: 1,
        ..RunConfig::default()
    }
}

fn status_of(harness: &Harness, code: &str, tests: &[TestCase]) -> Vec<TestStatus> {
    harness
        .evaluate(code, tests, 1.0)
        .unwrap()
        .per_test
        .iter()
        .map(|t| t.status)
        .collect()
}

#[test]
fn verdicts_per_test() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let harness = Harness::new(config()).unwrap();
    let tests = [case("1", "abc\n", "abc\n"), case("2", "x\n", "y\n")];
    assert_eq!(
        status_of(&harness, &source("echo.cpp"), &tests),
        [TestStatus::Passed, TestStatus::WrongAnswer]
    );

    let crash = "#include <cstdlib>\nint main() { std::abort(); }\n";
    assert_eq!(status_of(&harness, crash, &tests[..1]), [TestStatus::RuntimeError]);
    let exit_code = "int main() { return 3; }\n";
    assert_eq!(status_of(&harness, exit_code, &tests[..1]), [TestStatus::RuntimeError]);
}

#[test]
fn output_limit_and_timeout() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let harness = Harness::new(RunConfig {
        max_output_bytes: 1024,
        per_test_time_limit_seconds: 0.5,
        ..config()
    })
    .unwrap();
    let chatty = "#include <cstdio>\nint main() { for (int i = 0; i < 100000; i++) std::puts(\"spam\"); }\n";
    let tests = [case("1", "", "")];
    assert_eq!(status_of(&harness, chatty, &tests), [TestStatus::OutputLimitExceeded]);

    let result = harness.evaluate(&source("loop.cpp"), &tests, 1.0).unwrap();
    assert_eq!(result.per_test[0].status, TestStatus::Timeout);
    assert!(!result.correct);
    assert_eq!(result.speedup, 1.0);
    assert!(result.per_test[0].wall_seconds < 1.5);
}

#[test]
fn compile_failure_is_a_result_not_an_error() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let harness = Harness::new(config()).unwrap();
    let result = harness
        .evaluate(&source("broken.cpp"), &[case("1", "", "")], 0.5)
        .unwrap();
    assert!(!result.compiled && !result.correct && !result.effective);
    assert_eq!(result.speedup, 1.0);
    let log = result.compile_log.clone().unwrap();
    assert!(log.contains("undeclared_identifier"), "{log}");
    // Logs name the source relative to the scratch directory.
    assert!(!log.contains("/tmp/"), "{log}");
    assert!(result.protocol_violation().is_none());

    let empty = harness.evaluate("  \n", &[case("1", "", "")], 0.5).unwrap();
    assert!(!empty.compiled);
}

#[test]
fn missing_compiler_is_an_environment_error() {
    let cfg = RunConfig {
        compile_command: "perfforge-missing-cc {src} -o {out}".into(),
        ..config()
    };
    match compile("int main(){}", &cfg) {
        Err(EvalError::CompilerMissing(name)) => assert_eq!(name, "perfforge-missing-cc"),
        other => panic!("expected CompilerMissing, got {other:?}"),
    }
}

#[test]
fn baseline_must_pass_its_tests() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let harness = Harness::new(config()).unwrap();
    let err = harness
        .baseline_runtime(&source("echo.cpp"), &[case("1", "a", "b")])
        .unwrap_err();
    assert!(matches!(err, EvalError::Baseline(_)), "{err}");
    let err = harness
        .baseline_runtime(&source("broken.cpp"), &[case("1", "", "")])
        .unwrap_err();
    assert!(matches!(err, EvalError::Baseline(_)), "{err}");
}

#[test]
fn identical_sources_compile_once() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let harness = Harness::new(config()).unwrap();
    let path = |o: CompileOutcome| match o {
        CompileOutcome::Success(b) => b.path().to_path_buf(),
        CompileOutcome::Failure { log } => panic!("{log}"),
    };
    let a = path(harness.compile(&source("echo.cpp")).unwrap());
    let b = path(harness.compile(&source("echo.cpp")).unwrap());
    assert_eq!(a, b);
}

#[test]
fn quantized_runtimes_repeat_exactly() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = config();
    let tests = [case("1", "", "")];
    let first = Harness::new(cfg.clone()).unwrap();
    let second = Harness::new(cfg).unwrap();
    let t1 = first.baseline_runtime(&source("sleep100.cpp"), &tests).unwrap();
    let t2 = second.baseline_runtime(&source("sleep100.cpp"), &tests).unwrap();
    assert_eq!(t1, t2);
    assert!(
        (t1 / 0.05 - (t1 / 0.05).round()).abs() < 1e-9,
        "{t1} is not a multiple of the quantum"
    );
}

#[test]
fn test_bundles_load_in_numeric_order() {
    let dir = tempfile::tempdir().unwrap();
    for n in [10, 2, 1] {
        std::fs::write(dir.path().join(format!("{n}.in")), format!("{n}")).unwrap();
        std::fs::write(dir.path().join(format!("{n}.out")), format!("{n}")).unwrap();
    }
    let ids: Vec<String> = load_test_dir(dir.path(), Comparison::Exact)
        .unwrap()
        .into_iter()
        .map(|t| t.id)
        .collect();
    assert_eq!(ids, ["1", "2", "10"]);

    std::fs::remove_file(dir.path().join("2.out")).unwrap();
    assert!(matches!(
        load_test_dir(dir.path(), Comparison::Exact),
        Err(EvalError::Tests { .. })
    ));
}

fn binary(code: &str, cfg: &RunConfig) -> perfforge_core::evalbench::Binary {
    match compile(code, cfg).unwrap() {
        CompileOutcome::Success(b) => b,
        CompileOutcome::Failure { log } => panic!("{log}"),
    }
}

fn assert_near(measured: f64, expected: f64) {
    let err = (measured - expected).abs() / expected;
    assert!(err <= SLEEP_TOLERANCE, "measured {measured}s, expected {expected}s");
}

#[test]
fn runtime_is_median_of_repetitions() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = RunConfig {
        repetitions: 3,
        warmups: 1,
        aggregation: Aggregation::Median,
        runtime_quantum_seconds: 0.0,
        ..config()
    };
    let bin = binary(SLEEP_MS, &cfg);
    assert_near(measure_runtime(&bin, &[case("1", "100", "")], &cfg).unwrap(), 0.1);
}

#[test]
fn runtime_sums_across_tests() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = RunConfig {
        runtime_quantum_seconds: 0.0,
        ..config()
    };
    let bin = binary(SLEEP_MS, &cfg);
    let tests = [case("1", "50", ""), case("2", "50", "")];
    assert_near(measure_runtime(&bin, &tests, &cfg).unwrap(), 0.1);
}

#[test]
fn timeout_during_measurement_fails_it() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = RunConfig {
        per_test_time_limit_seconds: 0.2,
        ..config()
    };
    let bin = binary(SLEEP_MS, &cfg);
    let err = measure_runtime(&bin, &[case("1", "500", "")], &cfg).unwrap_err();
    assert!(matches!(err, EvalError::Measurement { .. }), "{err}");
}
