//! Compile / judge / time harness and the three reported metrics.
//!
//! Protocol:
//! - a candidate is *correct* iff it compiles and passes every test case;
//! - an incorrect candidate gets speedup 1.0, a correct one `t_slow / t_fast`
//!   with no clamping (correct but slower code keeps its ratio below 1);
//! - an *effective* optimization is correct with speedup >= 1.1 (inclusive).
//!
//! Runtime is the wall time of the whole test suite, aggregated over
//! `repetitions` timed passes after `warmups` discarded ones. Reported
//! runtimes can be rounded to a fixed quantum so reruns report identical
//! numbers when jitter stays below half a quantum.
//!
//! Children run in a scratch directory with a wall-clock limit, a stdout cap
//! and their own process group. Stronger isolation (namespaces, seccomp) is
//! a deployment concern and not handled here.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::{Arc, Condvar, Mutex, OnceLock, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::sha256_hex;

/// Threshold for an effective optimization.
pub const EFFECTIVE_SPEEDUP: f64 = 1.1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("compiler `{0}` not found")]
    CompilerMissing(String),
    #[error("{context}: {source}")]
    Environment {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("invalid test bundle {path}: {reason}")]
    Tests { path: PathBuf, reason: String },
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("measurement failed on test {test}: {reason}")]
    Measurement { test: String, reason: String },
    #[error("baseline program is not usable: {0}")]
    Baseline(String),
    #[error("no results to aggregate")]
    NoResults,
}

fn env_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> EvalError {
    let context = context.into();
    move |source| EvalError::Environment { context, source }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Exact,
    #[default]
    TrailingWhitespaceTrimmed,
}

impl Comparison {
    pub fn matches(self, actual: &[u8], expected: &[u8]) -> bool {
        match self {
            Comparison::Exact => actual == expected,
            Comparison::TrailingWhitespaceTrimmed => normalize_trailing(actual) == normalize_trailing(expected),
        }
    }
}

/// Strips trailing whitespace from every line and drops trailing empty lines.
fn normalize_trailing(bytes: &[u8]) -> Vec<&[u8]> {
    let mut lines: Vec<&[u8]> = bytes
        .split(|b| *b == b'\n')
        .map(|l| {
            let end = l.iter().rposition(|b| !b.is_ascii_whitespace()).map_or(0, |i| i + 1);
            &l[..end]
        })
        .collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub stdin_payload: Vec<u8>,
    pub expected_stdout: Vec<u8>,
    #[serde(default)]
    pub comparison: Comparison,
}

/// Loads `<dir>/<n>.in` / `<dir>/<n>.out` pairs ordered by `n`.
pub fn load_test_dir(dir: &Path, comparison: Comparison) -> Result<Vec<TestCase>, EvalError> {
    let bad = |reason: String| EvalError::Tests {
        path: dir.to_path_buf(),
        reason,
    };
    let entries = std::fs::read_dir(dir).map_err(|e| bad(e.to_string()))?;
    let mut ids: Vec<(u64, String)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| bad(e.to_string()))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("in") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let n: u64 = stem
            .parse()
            .map_err(|_| bad(format!("test name {stem:?} is not a number")))?;
        ids.push((n, stem));
    }
    ids.sort();
    if ids.is_empty() {
        return Err(bad("no <n>.in files".into()));
    }
    ids.into_iter()
        .map(|(_, id)| {
            let input = dir.join(format!("{id}.in"));
            let output = dir.join(format!("{id}.out"));
            Ok(TestCase {
                stdin_payload: std::fs::read(&input).map_err(|e| bad(format!("{id}.in: {e}")))?,
                expected_stdout: std::fs::read(&output).map_err(|e| bad(format!("{id}.out: {e}")))?,
                id,
                comparison,
            })
        })
        .collect()
}

/// Tests of one problem inside a bundle laid out as `<root>/<problem_id>/tests/`.
pub fn load_problem_tests(root: &Path, problem_id: &str, comparison: Comparison) -> Result<Vec<TestCase>, EvalError> {
    load_test_dir(&root.join(problem_id).join("tests"), comparison)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Min,
    #[default]
    Median,
    Mean,
}

impl Aggregation {
    pub fn apply(self, samples: &[f64]) -> Option<f64> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(match self {
            Aggregation::Min => sorted[0],
            Aggregation::Mean => sorted.iter().sum::<f64>() / sorted.len() as f64,
            Aggregation::Median => {
                let mid = sorted.len() / 2;
                if sorted.len() % 2 == 1 {
                    sorted[mid]
                } else {
                    (sorted[mid - 1] + sorted[mid]) / 2.0
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingIsolation {
    /// Timed runs hold the harness exclusively; everything else waits.
    #[default]
    SerializeTiming,
    /// Timed runs proceed concurrently, each pinned to its own core.
    PinPerCore,
}

fn d_compile() -> String {
    "g++ -O3 -std=c++17 -o {out} {src}".into()
}
fn d_ext() -> String {
    "cpp".into()
}
fn d_compile_limit() -> f64 {
    120.0
}
fn d_test_limit() -> f64 {
    10.0
}
fn d_reps() -> u32 {
    3
}
fn d_warmups() -> u32 {
    1
}
fn d_max_output() -> usize {
    16 << 20
}
fn d_workers() -> usize {
    thread::available_parallelism().map_or(1, usize::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Whitespace-separated command; `{src}` and `{out}` are replaced by
    /// file names inside the scratch directory. No shell is involved.
    #[serde(default = "d_compile")]
    pub compile_command: String,
    #[serde(default = "d_ext")]
    pub source_extension: String,
    #[serde(default = "d_compile_limit")]
    pub compile_time_limit_seconds: f64,
    #[serde(default = "d_test_limit")]
    pub per_test_time_limit_seconds: f64,
    #[serde(default = "d_reps")]
    pub repetitions: u32,
    #[serde(default = "d_warmups")]
    pub warmups: u32,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub timing_isolation: TimingIsolation,
    #[serde(default)]
    pub comparison: Comparison,
    #[serde(default = "d_max_output")]
    pub max_output_bytes: usize,
    /// Reported runtimes are rounded to multiples of this (0 disables).
    #[serde(default)]
    pub runtime_quantum_seconds: f64,
    #[serde(default = "d_workers")]
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            compile_command: d_compile(),
            source_extension: d_ext(),
            compile_time_limit_seconds: d_compile_limit(),
            per_test_time_limit_seconds: d_test_limit(),
            repetitions: d_reps(),
            warmups: d_warmups(),
            aggregation: Aggregation::default(),
            timing_isolation: TimingIsolation::default(),
            comparison: Comparison::default(),
            max_output_bytes: d_max_output(),
            runtime_quantum_seconds: 0.0,
            workers: d_workers(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |m: &str| Err(EvalError::Config(m.into()));
        if !(self.per_test_time_limit_seconds > 0.0) || !self.per_test_time_limit_seconds.is_finite() {
            return fail("per_test_time_limit_seconds must be > 0");
        }
        if !(self.compile_time_limit_seconds > 0.0) {
            return fail("compile_time_limit_seconds must be > 0");
        }
        if self.repetitions == 0 {
            return fail("repetitions must be >= 1");
        }
        if !(self.runtime_quantum_seconds >= 0.0) {
            return fail("runtime_quantum_seconds must be >= 0");
        }
        if self.workers == 0 {
            return fail("workers must be >= 1");
        }
        if !self.compile_command.contains("{src}") || !self.compile_command.contains("{out}") {
            return fail("compile_command must reference {src} and {out}");
        }
        if self.compile_command.split_whitespace().next().is_none() {
            return fail("compile_command is empty");
        }
        Ok(())
    }

    /// Rounds a runtime to the configured quantum (never below one quantum).
    pub fn quantize(&self, seconds: f64) -> f64 {
        let q = self.runtime_quantum_seconds;
        if q <= 0.0 {
            return seconds;
        }
        let steps = (seconds / q).round().max(1.0);
        ((steps * q) * 1e9).round() / 1e9
    }
}

// Timed runs take the write side; compiles and correctness runs the read side.
static TIMING_GATE: RwLock<()> = RwLock::new(());

struct CoreSlots {
    busy: Mutex<Vec<bool>>,
    freed: Condvar,
}

fn core_slots() -> &'static CoreSlots {
    static SLOTS: OnceLock<CoreSlots> = OnceLock::new();
    SLOTS.get_or_init(|| CoreSlots {
        busy: Mutex::new(vec![false; d_workers()]),
        freed: Condvar::new(),
    })
}

struct CoreLease(usize);

impl CoreLease {
    fn acquire() -> Self {
        let slots = core_slots();
        let mut busy = slots.busy.lock().expect("core slots");
        loop {
            if let Some(i) = busy.iter().position(|b| !b) {
                busy[i] = true;
                return CoreLease(i);
            }
            busy = slots.freed.wait(busy).expect("core slots");
        }
    }
}

impl Drop for CoreLease {
    fn drop(&mut self) {
        let slots = core_slots();
        slots.busy.lock().expect("core slots")[self.0] = false;
        slots.freed.notify_one();
    }
}

#[derive(Debug)]
struct ChildRun {
    /// `None` when the time limit expired.
    status: Option<ExitStatus>,
    stdout: Vec<u8>,
    stdout_overflow: bool,
    stderr: Vec<u8>,
    wall: Duration,
}

fn read_capped(mut source: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut overflow = false;
    let mut buf = [0u8; 8192];
    loop {
        match source.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                if n > room {
                    overflow = true;
                }
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    (kept, overflow)
}

fn kill_group(child: &mut Child) {
    // SAFETY: kill(2) on the child's own process group; no memory is touched.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
    let _ = child.kill();
}

fn run_child(mut cmd: Command, stdin: &[u8], limit: Duration, max_output: usize) -> io::Result<ChildRun> {
    cmd.stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn()?;

    let mut pipe_in = child.stdin.take().expect("piped stdin");
    let payload = stdin.to_vec();
    let writer = thread::spawn(move || {
        let _ = pipe_in.write_all(&payload);
    });
    let out = child.stdout.take().expect("piped stdout");
    let reader = thread::spawn(move || read_capped(out, max_output));
    let err = child.stderr.take().expect("piped stderr");
    let err_reader = thread::spawn(move || read_capped(err, 64 << 10));

    let status = match child.wait_timeout(limit)? {
        Some(status) => Some(status),
        None => {
            kill_group(&mut child);
            child.wait()?;
            None
        }
    };
    let wall = start.elapsed();
    let _ = writer.join();
    let (stdout, stdout_overflow) = reader.join().unwrap_or_default();
    let (stderr, _) = err_reader.join().unwrap_or_default();
    Ok(ChildRun {
        status,
        stdout,
        stdout_overflow,
        stderr,
        wall,
    })
}

/// A compiled program inside its scratch directory. The directory lives as
/// long as any clone of the handle.
#[derive(Debug, Clone)]
pub struct Binary {
    path: PathBuf,
    _workspace: Arc<tempfile::TempDir>,
}

impl Binary {
    pub fn path(&self) -> &Path {
        &self.path
    }

    fn workdir(&self) -> &Path {
        self.path.parent().expect("binary lives in its workspace")
    }

    fn command(&self, core: Option<usize>) -> Command {
        let mut cmd = Command::new(&self.path);
        cmd.current_dir(self.workdir()).env_clear();
        if let Some(core) = core {
            // SAFETY: only async-signal-safe libc calls between fork and exec.
            unsafe {
                cmd.pre_exec(move || {
                    let mut set: libc::cpu_set_t = std::mem::zeroed();
                    libc::CPU_SET(core, &mut set);
                    if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                        return Err(io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
        }
        cmd
    }
}

#[derive(Debug, Clone)]
pub enum CompileOutcome {
    Success(Binary),
    Failure { log: String },
}

/// Compiles `source` in a fresh scratch directory.
pub fn compile(source: &str, config: &RunConfig) -> Result<CompileOutcome, EvalError> {
    if source.trim().is_empty() {
        return Ok(CompileOutcome::Failure {
            log: "empty source".into(),
        });
    }
    let workspace = tempfile::Builder::new()
        .prefix("perfforge-")
        .tempdir()
        .map_err(env_err("creating scratch directory"))?;
    let src_name = format!("main.{}", config.source_extension);
    let out_name = "main";
    std::fs::write(workspace.path().join(&src_name), source).map_err(env_err("writing source"))?;

    let mut tokens = config
        .compile_command
        .split_whitespace()
        .map(|t| t.replace("{src}", &src_name).replace("{out}", out_name));
    let program = tokens
        .next()
        .ok_or_else(|| EvalError::Config("compile_command is empty".into()))?;
    let mut cmd = Command::new(&program);
    cmd.args(tokens).current_dir(workspace.path());

    let _shared = TIMING_GATE.read().unwrap_or_else(|e| e.into_inner());
    let run = match run_child(
        cmd,
        &[],
        Duration::from_secs_f64(config.compile_time_limit_seconds),
        1 << 20,
    ) {
        Ok(run) => run,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(EvalError::CompilerMissing(program)),
        Err(e) => return Err(env_err(format!("running {program}"))(e)),
    };
    let binary = workspace.path().join(out_name);
    match run.status {
        Some(status) if status.success() && binary.exists() => Ok(CompileOutcome::Success(Binary {
            path: binary,
            _workspace: Arc::new(workspace),
        })),
        status => {
            let mut log = String::from_utf8_lossy(&run.stderr).into_owned();
            log.push_str(&String::from_utf8_lossy(&run.stdout));
            if log.trim().is_empty() {
                log = match status {
                    Some(s) => format!("compiler exited with {s}"),
                    None => "compiler timed out".into(),
                };
            }
            Ok(CompileOutcome::Failure { log })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Passed,
    WrongAnswer,
    Timeout,
    RuntimeError,
    OutputLimitExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub id: String,
    pub passed: bool,
    pub status: TestStatus,
    pub wall_seconds: f64,
}

fn judge(run: &ChildRun, test: &TestCase) -> TestStatus {
    match run.status {
        None => TestStatus::Timeout,
        Some(_) if run.stdout_overflow => TestStatus::OutputLimitExceeded,
        Some(s) if !s.success() => TestStatus::RuntimeError,
        Some(_) if test.comparison.matches(&run.stdout, &test.expected_stdout) => TestStatus::Passed,
        Some(_) => TestStatus::WrongAnswer,
    }
}

/// Runs every test once under the time limit and judges the output.
pub fn run_tests(binary: &Binary, tests: &[TestCase], config: &RunConfig) -> Result<Vec<TestOutcome>, EvalError> {
    let _shared = TIMING_GATE.read().unwrap_or_else(|e| e.into_inner());
    let limit = Duration::from_secs_f64(config.per_test_time_limit_seconds);
    tests
        .iter()
        .map(|test| {
            let run = run_child(
                binary.command(None),
                &test.stdin_payload,
                limit,
                config.max_output_bytes,
            )
            .map_err(env_err(format!("running test {}", test.id)))?;
            let status = judge(&run, test);
            Ok(TestOutcome {
                id: test.id.clone(),
                passed: status == TestStatus::Passed,
                status,
                wall_seconds: config.quantize(run.wall.as_secs_f64()),
            })
        })
        .collect()
}

/// Total suite wall time, aggregated over the timed repetitions.
pub fn measure_runtime(binary: &Binary, tests: &[TestCase], config: &RunConfig) -> Result<f64, EvalError> {
    let (_exclusive, _shared, lease);
    match config.timing_isolation {
        TimingIsolation::SerializeTiming => {
            _exclusive = Some(TIMING_GATE.write().unwrap_or_else(|e| e.into_inner()));
            lease = None;
        }
        TimingIsolation::PinPerCore => {
            _shared = Some(TIMING_GATE.read().unwrap_or_else(|e| e.into_inner()));
            lease = Some(CoreLease::acquire());
        }
    }
    let core = lease.as_ref().map(|l: &CoreLease| l.0);
    let limit = Duration::from_secs_f64(config.per_test_time_limit_seconds);

    let mut samples = Vec::with_capacity(config.repetitions as usize);
    for rep in 0..(config.warmups + config.repetitions) {
        let mut total = 0.0;
        for test in tests {
            let run = run_child(
                binary.command(core),
                &test.stdin_payload,
                limit,
                config.max_output_bytes,
            )
            .map_err(env_err(format!("timing test {}", test.id)))?;
            let reason = match run.status {
                None => Some("time limit exceeded".to_string()),
                Some(s) if !s.success() => Some(format!("exited with {s}")),
                Some(_) => None,
            };
            if let Some(reason) = reason {
                return Err(EvalError::Measurement {
                    test: test.id.clone(),
                    reason,
                });
            }
            total += run.wall.as_secs_f64();
        }
        if rep >= config.warmups {
            samples.push(total);
        }
    }
    let aggregated = config.aggregation.apply(&samples).expect("repetitions >= 1");
    Ok(config.quantize(aggregated))
}

/// `t_slow / t_fast` for correct programs, 1.0 otherwise.
pub fn speedup(t_slow: f64, t_fast: Option<f64>, correct: bool) -> Result<f64, EvalError> {
    if !(t_slow > 0.0) || !t_slow.is_finite() {
        return Err(EvalError::InvalidMeasurement(format!("baseline runtime {t_slow}")));
    }
    if !correct {
        return Ok(1.0);
    }
    match t_fast {
        Some(t) if t > 0.0 && t.is_finite() => Ok(t_slow / t),
        other => Err(EvalError::InvalidMeasurement(format!("candidate runtime {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub compiled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compile_log: Option<String>,
    pub per_test: Vec<TestOutcome>,
    #[serde(default)]
    pub runtime_seconds: Option<f64>,
    #[serde(default)]
    pub baseline_runtime_seconds: Option<f64>,
    pub correct: bool,
    pub speedup: f64,
    pub effective: bool,
    /// Compiler invocation, recorded for provenance.
    pub compile_command: String,
}

impl EvalResult {
    pub fn compile_failure(log: String, t_slow: f64, config: &RunConfig) -> Self {
        EvalResult {
            compiled: false,
            compile_log: Some(log),
            per_test: Vec::new(),
            runtime_seconds: None,
            baseline_runtime_seconds: Some(t_slow),
            correct: false,
            speedup: 1.0,
            effective: false,
            compile_command: config.compile_command.clone(),
        }
    }

    /// Builds a result from judged tests; enforces the protocol invariants.
    pub fn judged(
        per_test: Vec<TestOutcome>,
        runtime_seconds: Option<f64>,
        t_slow: f64,
        config: &RunConfig,
    ) -> Result<Self, EvalError> {
        let correct = !per_test.is_empty() && per_test.iter().all(|t| t.passed) && runtime_seconds.is_some();
        let speedup = speedup(t_slow, runtime_seconds, correct)?;
        let mut result = EvalResult {
            compiled: true,
            compile_log: None,
            per_test,
            runtime_seconds: if correct { runtime_seconds } else { None },
            baseline_runtime_seconds: Some(t_slow),
            correct,
            speedup,
            effective: false,
            compile_command: config.compile_command.clone(),
        };
        result.effective = effective(&result);
        Ok(result)
    }

    /// Checks `¬correct ⇒ speedup = 1`, `effective ⇒ correct ∧ speedup >= 1.1`
    /// and `correct ⇔ compiled ∧ all tests passed`.
    pub fn protocol_violation(&self) -> Option<String> {
        let all_passed = !self.per_test.is_empty() && self.per_test.iter().all(|t| t.passed);
        if self.correct != (self.compiled && all_passed) {
            return Some("correct disagrees with compiled/tests".into());
        }
        if !self.correct && self.speedup != 1.0 {
            return Some(format!("incorrect result has speedup {}", self.speedup));
        }
        if self.effective && !(self.correct && self.speedup >= EFFECTIVE_SPEEDUP) {
            return Some("effective result is not a correct >=1.1x speedup".into());
        }
        if self.effective != effective(self) {
            return Some("effective flag disagrees with its definition".into());
        }
        None
    }
}

/// Correct and at least 1.1x faster.
pub fn effective(result: &EvalResult) -> bool {
    result.correct && result.speedup >= EFFECTIVE_SPEEDUP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mean_speedup: f64,
    pub effective_rate_percent: f64,
    pub accuracy_percent: f64,
}

/// Mean speedup (incorrect counted at 1.0), effective rate and accuracy.
/// Speedups are summed in sorted order so the result does not depend on the
/// order of `results`.
pub fn aggregate_metrics(results: &[EvalResult]) -> Result<Metrics, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    let n = results.len();
    let mut speedups: Vec<f64> = results
        .iter()
        .map(|r| if r.correct { r.speedup } else { 1.0 })
        .collect();
    speedups.sort_by(f64::total_cmp);
    let effective = results.iter().filter(|r| effective(r)).count();
    let correct = results.iter().filter(|r| r.correct).count();
    Ok(Metrics {
        count: n,
        mean_speedup: speedups.iter().sum::<f64>() / n as f64,
        effective_rate_percent: 100.0 * effective as f64 / n as f64,
        accuracy_percent: 100.0 * correct as f64 / n as f64,
    })
}

/// A candidate to evaluate against a measured baseline.
#[derive(Debug, Clone)]
pub struct EvalJob {
    pub source: String,
    pub tests: Arc<Vec<TestCase>>,
    pub baseline_seconds: f64,
}

struct HarnessInner {
    config: RunConfig,
    compiled: Mutex<HashMap<String, CompileOutcome>>,
    baselines: Mutex<HashMap<String, f64>>,
    pool: rayon::ThreadPool,
}

/// Caching front end over compile / judge / measure.
#[derive(Clone)]
pub struct Harness {
    inner: Arc<HarnessInner>,
}

impl Harness {
    pub fn new(config: RunConfig) -> Result<Self, EvalError> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .thread_name(|i| format!("evalbench-{i}"))
            .build()
            .map_err(|e| EvalError::Config(e.to_string()))?;
        Ok(Self {
            inner: Arc::new(HarnessInner {
                config,
                compiled: Mutex::new(HashMap::new()),
                baselines: Mutex::new(HashMap::new()),
                pool,
            }),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.inner.config
    }

    /// Compiles once per distinct source text.
    pub fn compile(&self, source: &str) -> Result<CompileOutcome, EvalError> {
        let key = sha256_hex(source);
        if let Some(hit) = self.inner.compiled.lock().expect("harness cache").get(&key) {
            return Ok(hit.clone());
        }
        let outcome = compile(source, &self.inner.config)?;
        self.inner
            .compiled
            .lock()
            .expect("harness cache")
            .insert(key, outcome.clone());
        Ok(outcome)
    }

    /// Runtime of the slow program; it must compile and pass every test.
    pub fn baseline_runtime(&self, slow_source: &str, tests: &[TestCase]) -> Result<f64, EvalError> {
        let key = sha256_hex(format!(
            "{}\0{}",
            sha256_hex(slow_source),
            sha256_hex(serde_json::to_vec(tests).expect("tests serialize"))
        ));
        if let Some(t) = self.inner.baselines.lock().expect("harness cache").get(&key) {
            return Ok(*t);
        }
        let binary = match self.compile(slow_source)? {
            CompileOutcome::Success(b) => b,
            CompileOutcome::Failure { log } => return Err(EvalError::Baseline(format!("does not compile: {log}"))),
        };
        let outcomes = run_tests(&binary, tests, &self.inner.config)?;
        if let Some(failed) = outcomes.iter().find(|o| !o.passed) {
            return Err(EvalError::Baseline(format!(
                "test {} is {:?}",
                failed.id, failed.status
            )));
        }
        let t = measure_runtime(&binary, tests, &self.inner.config).map_err(|e| EvalError::Baseline(e.to_string()))?;
        self.inner.baselines.lock().expect("harness cache").insert(key, t);
        Ok(t)
    }

    /// Full protocol for one candidate.
    pub fn evaluate(&self, source: &str, tests: &[TestCase], baseline_seconds: f64) -> Result<EvalResult, EvalError> {
        let config = &self.inner.config;
        let binary = match self.compile(source)? {
            CompileOutcome::Success(b) => b,
            CompileOutcome::Failure { log } => return Ok(EvalResult::compile_failure(log, baseline_seconds, config)),
        };
        let mut outcomes = run_tests(&binary, tests, config)?;
        let all_passed = outcomes.iter().all(|o| o.passed);
        let runtime = if all_passed {
            match measure_runtime(&binary, tests, config) {
                Ok(t) => Some(t),
                Err(EvalError::Measurement { test, reason }) => {
                    tracing::warn!(%test, %reason, "timed run failed; judging candidate incorrect");
                    if let Some(o) = outcomes.iter_mut().find(|o| o.id == test) {
                        o.passed = false;
                        o.status = if reason.contains("time limit") {
                            TestStatus::Timeout
                        } else {
                            TestStatus::RuntimeError
                        };
                    }
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        EvalResult::judged(outcomes, runtime, baseline_seconds, config)
    }

    /// Evaluates jobs on the harness's worker pool; output order follows input.
    pub fn evaluate_batch(&self, jobs: &[EvalJob]) -> Vec<Result<EvalResult, EvalError>> {
        self.inner.pool.install(|| {
            jobs.par_iter()
                .map(|job| self.evaluate(&job.source, &job.tests, job.baseline_seconds))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(passed: bool) -> TestOutcome {
        TestOutcome {
            id: "1".into(),
            passed,
            status: if passed {
                TestStatus::Passed
            } else {
                TestStatus::WrongAnswer
            },
            wall_seconds: 0.1,
        }
    }

    fn result(correct: bool, speedup: f64) -> EvalResult {
        let cfg = RunConfig::default();
        let t_slow = 10.0;
        let runtime = correct.then_some(t_slow / speedup);
        EvalResult::judged(vec![outcome(correct)], runtime, t_slow, &cfg).unwrap()
    }

    #[test]
    fn comparison_modes() {
        let trimmed = Comparison::TrailingWhitespaceTrimmed;
        assert!(trimmed.matches(b"42\n", b"42"));
        assert!(trimmed.matches(b"1 2 \n3\n\n", b"1 2\n3"));
        assert!(!trimmed.matches(b"4 2", b"42"));
        assert!(!Comparison::Exact.matches(b"42\n", b"42"));
        assert!(Comparison::Exact.matches(b"42", b"42"));
    }

    #[test]
    fn speedup_table() {
        assert_eq!(speedup(10.0, Some(4.0), true).unwrap(), 2.5);
        assert_eq!(speedup(10.0, Some(4.0), false).unwrap(), 1.0);
        assert_eq!(speedup(10.0, Some(10.0), true).unwrap(), 1.0);
        assert_eq!(speedup(10.0, None, false).unwrap(), 1.0);
        assert!(speedup(0.0, Some(1.0), true).is_err());
        assert!(speedup(1.0, Some(0.0), true).is_err());
    }

    #[test]
    fn effective_boundary_inclusive() {
        assert!(effective(&result(true, 1.1)));
        assert!(!effective(&result(true, 1.05)));
        let wrong = result(false, 3.0);
        assert_eq!(wrong.speedup, 1.0);
        assert!(!effective(&wrong));
    }

    #[test]
    fn slower_correct_results_are_not_clamped() {
        let r = result(true, 0.5);
        assert_eq!(r.speedup, 0.5);
        assert!(r.protocol_violation().is_none());
    }

    #[test]
    fn metrics_examples() {
        let rs = vec![result(true, 2.0), result(false, 1.0), result(true, 3.0)];
        let m = aggregate_metrics(&rs).unwrap();
        assert_eq!(m.mean_speedup, 2.0);
        assert!((m.effective_rate_percent - 200.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy_percent - 200.0 / 3.0).abs() < 1e-12);

        let m = aggregate_metrics(&[result(false, 1.0), result(false, 2.0)]).unwrap();
        assert_eq!(
            (m.mean_speedup, m.effective_rate_percent, m.accuracy_percent),
            (1.0, 0.0, 0.0)
        );

        let m = aggregate_metrics(&[result(true, 1.2)]).unwrap();
        assert!((m.mean_speedup - 1.2).abs() < 1e-12);
        assert_eq!((m.effective_rate_percent, m.accuracy_percent), (100.0, 100.0));

        assert!(matches!(aggregate_metrics(&[]), Err(EvalError::NoResults)));
    }

    #[test]
    fn aggregation_rules() {
        let s = [3.0, 1.0, 2.0, 10.0];
        assert_eq!(Aggregation::Min.apply(&s), Some(1.0));
        assert_eq!(Aggregation::Median.apply(&s), Some(2.5));
        assert_eq!(Aggregation::Mean.apply(&s), Some(4.0));
        assert_eq!(Aggregation::Median.apply(&[0.2]), Some(0.2));
        assert_eq!(Aggregation::Median.apply(&[]), None);
    }

    #[test]
    fn quantization() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.quantize(0.1234), 0.1234);
        cfg.runtime_quantum_seconds = 0.05;
        assert_eq!(cfg.quantize(0.1234), 0.1);
        assert_eq!(cfg.quantize(0.1400), 0.15);
        assert_eq!(cfg.quantize(0.001), 0.05);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.repetitions = 0;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            compile_command: "g++ main.cpp".into(),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_dir_loading_orders_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for n in [10, 2, 1] {
            std::fs::write(dir.path().join(format!("{n}.in")), format!("{n}")).unwrap();
            std::fs::write(dir.path().join(format!("{n}.out")), format!("{n}")).unwrap();
        }
        let tests = load_test_dir(dir.path(), Comparison::Exact).unwrap();
        let ids: Vec<&str> = tests.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, vec!["1", "2", "10"]);
        std::fs::remove_file(dir.path().join("2.out")).unwrap();
        assert!(matches!(
            load_test_dir(dir.path(), Comparison::Exact),
            Err(EvalError::Tests { .. })
        ));
    }

    #[test]
    fn missing_compiler_is_environment_error() {
        let cfg = RunConfig {
            compile_command: "definitely-not-a-compiler-xyz -o {out} {src}".into(),
            ..RunConfig::default()
        };
        assert!(matches!(
            compile("int main(){}", &cfg),
            Err(EvalError::CompilerMissing(_))
        ));
        assert!(matches!(compile("", &cfg), Ok(CompileOutcome::Failure { .. })));
    }
}
