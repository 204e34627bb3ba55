//! Helpers shared by the CLI integration tests: fixture paths, running the
//! binary, an in-process mock model server and the fixture pipeline.
#![allow(dead_code)]

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard};

use perfforge_core::jsonl;
use perfforge_core::orchestrate::{MockConfig, MockServer};
use serde_json::Value;

/// Runtime rounding used for every timed fixture run.
pub const QUANTUM: &str = "0.05";
pub const SEED: &str = "7";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Serializes tests that time programs; the host may have a single core.
pub fn timing_lock() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn command<S: AsRef<OsStr>>(args: &[S]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_perfforge"));
    cmd.args(args).env_remove("PERFFORGE_LOG");
    cmd
}

pub fn run<S: AsRef<OsStr>>(args: &[S]) -> Output {
    let out = command(args).output().expect("spawn perfforge");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs the binary and returns stdout, panicking with stderr on failure.
pub fn run_ok<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = run(args);
    assert_eq!(out.code, 0, "perfforge {args:?} failed:\n{}", out.stderr);
    out.stdout
}

/// Artifact text with the provenance timestamp removed.
pub fn stripped(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    jsonl::strip_timestamp(&text)
}

/// Records of a JSONL artifact, header excluded.
pub fn records(path: &Path) -> Vec<Value> {
    jsonl::read_jsonl(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn mock_config(path: &Path) -> MockConfig {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A mock server running on its own runtime.
pub struct Mock {
    rt: tokio::runtime::Runtime,
    server: Option<MockServer>,
}

impl Mock {
    pub fn start(config: MockConfig) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_all()
            .build()
            .unwrap();
        let server = rt.block_on(MockServer::start(config)).unwrap();
        Mock {
            rt,
            server: Some(server),
        }
    }

    pub fn url(&self) -> String {
        self.server.as_ref().unwrap().url()
    }

    pub fn requests_for_model(&self, model: &str) -> usize {
        self.server.as_ref().unwrap().requests_for_model(model)
    }

    pub fn received_for_model(&self, model: &str) -> usize {
        self.server.as_ref().unwrap().received_for_model(model)
    }

    pub fn max_in_flight(&self) -> usize {
        self.server.as_ref().unwrap().stats().max_in_flight
    }
}

impl Drop for Mock {
    fn drop(&mut self) {
        if let Some(server) = self.server.take() {
            self.rt.block_on(server.shutdown());
        }
    }
}

pub fn orchestration_dir() -> PathBuf {
    fixtures().join("orchestration")
}

/// `grpo-sample --g 4` over the five orchestration fixture programs.
pub fn grpo_sample_args(url: &str, out: &Path, journal: &Path) -> Vec<String> {
    let dir = orchestration_dir();
    [
        "grpo-sample",
        "--seed",
        SEED,
        "--g",
        "4",
        "--programs",
        dir.join("programs.jsonl").to_str().unwrap(),
        "--tests",
        dir.join("tests").to_str().unwrap(),
        "--planner-endpoint",
        url,
        "--planner-model",
        "planner",
        "--optimizer-endpoint",
        url,
        "--optimizer-model",
        "optimizer",
        "--quantum",
        QUANTUM,
        "--repetitions",
        "1",
        "--warmups",
        "0",
        "--out",
        out.to_str().unwrap(),
        "--journal",
        journal.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Deterministic per-token log-probabilities attached to every member so
/// the objective stages have something to consume.
pub fn with_logprobs(groups: &Path, out: &Path) {
    let mut lines = Vec::new();
    for mut g in records(groups) {
        for m in g["members"].as_array_mut().unwrap() {
            let i = m["index"].as_u64().unwrap() as f64;
            let len = 3 + m["index"].as_u64().unwrap() as usize;
            let new: Vec<f64> = (0..len).map(|t| -0.5 - 0.1 * t as f64 - 0.01 * i).collect();
            let old: Vec<f64> = new
                .iter()
                .enumerate()
                .map(|(t, v)| v + 0.15 * ((t % 3) as f64 - 1.0))
                .collect();
            let reference: Vec<f64> = new.iter().map(|v| v - 0.05).collect();
            m["logprobs"] = serde_json::json!({"new": new, "old": old, "ref": reference});
        }
        lines.push(g.to_string());
    }
    std::fs::write(out, lines.join("\n") + "\n").unwrap();
}

/// Runs every stage once into `dir` against the two mocks and returns the
/// artifacts written.
pub fn run_pipeline(dir: &Path, extractor_url: &str, model_url: &str) -> Vec<PathBuf> {
    let p = |name: &str| dir.join(name);
    let s = |path: PathBuf| path.to_str().unwrap().to_string();
    let orch = orchestration_dir();
    let programs = s(orch.join("programs.jsonl"));
    let timed = ["--quantum", QUANTUM, "--repetitions", "1", "--warmups", "0"];

    run_ok(&[
        "curate",
        "--seed",
        SEED,
        "--in",
        &s(core_fixtures().join("corpus/submissions.jsonl")),
        "--out",
        &s(p("pairs.jsonl")),
    ]);
    run_ok(&[
        "annotate",
        "--seed",
        SEED,
        "--pairs",
        &s(p("pairs.jsonl")),
        "--endpoint",
        extractor_url,
        "--model",
        "extractor",
        "--journal",
        &s(p("annotate.journal")),
        "--out",
        &s(p("annotated.jsonl")),
    ]);
    run_ok(&[
        "balance",
        "--seed",
        SEED,
        "--annotated",
        &s(p("annotated.jsonl")),
        "--budget",
        "6",
        "--out",
        &s(p("balanced.jsonl")),
        "--report",
        &s(p("balance.csv")),
    ]);
    run_ok(&[
        "pack",
        "--seed",
        SEED,
        "--annotated",
        &s(p("balanced.jsonl")),
        "--out",
        &s(p("packed.jsonl")),
    ]);

    let candidates: Vec<String> = records(&p("pairs.jsonl"))
        .iter()
        .map(|pair| {
            serde_json::json!({
                "pair_id": pair["pair_id"],
                "candidate_id": "fast",
                "code": pair["fast"]["source_code"],
            })
            .to_string()
        })
        .collect();
    std::fs::write(p("candidates.jsonl"), candidates.join("\n") + "\n").unwrap();
    let mut eval = vec![
        "eval".to_string(),
        "--seed".into(),
        SEED.into(),
        "--pairs".into(),
        s(p("pairs.jsonl")),
        "--candidates".into(),
        s(p("candidates.jsonl")),
        "--tests".into(),
        s(fixtures().join("pipeline/tests")),
        "--out".into(),
        s(p("results.jsonl")),
    ];
    eval.extend(timed.iter().map(|a| a.to_string()));
    run_ok(&eval);
    run_ok(&[
        "report",
        "--seed",
        SEED,
        "--results",
        &s(p("results.jsonl")),
        "--out",
        &s(p("metrics.csv")),
    ]);

    run_ok(&[
        "plan",
        "--seed",
        SEED,
        "--programs",
        &programs,
        "--endpoint",
        model_url,
        "--model",
        "planner",
        "--out",
        &s(p("plans.jsonl")),
    ]);
    run_ok(&[
        "optimize",
        "--mode",
        "single",
        "--seed",
        SEED,
        "--programs",
        &programs,
        "--planner-endpoint",
        model_url,
        "--planner-model",
        "planner",
        "--out",
        &s(p("single.jsonl")),
    ]);
    let mut two_step = vec![
        "optimize".to_string(),
        "--mode".into(),
        "two-step".into(),
        "--seed".into(),
        SEED.into(),
        "--programs".into(),
        programs.clone(),
        "--planner-endpoint".into(),
        model_url.into(),
        "--planner-model".into(),
        "planner".into(),
        "--optimizer-endpoint".into(),
        model_url.into(),
        "--optimizer-model".into(),
        "optimizer".into(),
        "--tests".into(),
        s(orch.join("tests")),
        "--out".into(),
        s(p("two_step.jsonl")),
    ];
    two_step.extend(timed.iter().map(|a| a.to_string()));
    run_ok(&two_step);
    run_ok(&grpo_sample_args(model_url, &p("groups.jsonl"), &p("groups.journal")));

    with_logprobs(&p("groups.jsonl"), &p("groups_logprobs.jsonl"));
    run_ok(&[
        "reward",
        "--seed",
        SEED,
        "--groups",
        &s(p("groups_logprobs.jsonl")),
        "--out",
        &s(p("rewarded.jsonl")),
    ]);
    run_ok(&[
        "grpo-objective",
        "--seed",
        SEED,
        "--groups",
        &s(p("rewarded.jsonl")),
        "--out",
        &s(p("objective.jsonl")),
    ]);

    [
        "pairs.jsonl",
        "annotated.jsonl",
        "balanced.jsonl",
        "balance.csv",
        "packed.jsonl",
        "results.jsonl",
        "metrics.csv",
        "plans.jsonl",
        "single.jsonl",
        "two_step.jsonl",
        "groups.jsonl",
        "rewarded.jsonl",
        "objective.jsonl",
    ]
    .iter()
    .map(|n| p(n))
    .collect()
}
