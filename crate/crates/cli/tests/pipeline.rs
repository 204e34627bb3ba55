//! End-to-end behavior of individual stages: golden artifacts, exit codes,
//! configuration precedence and the standalone mock server.

mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::Stdio;

use common::*;
use perfforge_core::orchestrate::{
    ChatCall, ChatClientConfig, ChatMessage, ChatModel, HttpChatClient, MockConfig, MockRule,
};

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn submissions() -> std::path::PathBuf {
    core_fixtures().join("corpus/submissions.jsonl")
}

fn body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("{\"_provenance\""))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[test]
fn curate_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pairs.jsonl");
    let summary = run_ok(&["curate", "--in", s(&submissions()), "--out", s(&out)]);
    assert!(summary.contains("\"pairs\":13"), "{summary}");
    assert!(summary.contains("\"cross_user\":7"), "{summary}");
    let golden = std::fs::read_to_string(fixtures().join("pipeline/d_ref.golden.jsonl")).unwrap();
    assert_eq!(body(&std::fs::read_to_string(&out).unwrap()), golden);
}

#[test]
fn report_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("metrics.csv");
    let results = fixtures().join("report/results.jsonl");
    let stdout = run_ok(&["report", "--results", s(&results), "--out", s(&out)]);
    let golden = std::fs::read_to_string(fixtures().join("report/metrics.golden.csv")).unwrap();
    assert_eq!(stdout, golden);
    let written = std::fs::read_to_string(&out).unwrap();
    assert!(written.starts_with("# {\"_provenance\""));
    assert_eq!(body(&written), golden);
}

#[test]
fn help_and_usage_exit_codes() {
    let help = run(&["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("grpo-sample"));
    assert_eq!(run(&["curate", "--no-such-flag"]).code, 1);
    assert_eq!(run(&["no-such-stage"]).code, 1);
    // Required path missing from both flags and config.
    let missing = run(&["curate", "--in", s(&submissions())]);
    assert_eq!(missing.code, 1, "{}", missing.stderr);
    assert!(missing.stderr.contains("--out"));
}

#[test]
fn missing_input_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pairs.jsonl");
    let absent = dir.path().join("absent.jsonl");
    let r = run(&["curate", "--in", s(&absent), "--out", s(&out)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("absent.jsonl"), "{}", r.stderr);
    assert!(!out.exists());
}

#[test]
fn malformed_input_leaves_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    let good = std::fs::read_to_string(submissions()).unwrap();
    std::fs::write(&bad, format!("{good}{{\"user_id\": \n")).unwrap();
    let out = dir.path().join("pairs.jsonl");
    let r = run(&["curate", "--in", s(&bad), "--out", s(&out)]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(!out.exists());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(leftovers.len(), 1, "{leftovers:?}");
}

#[test]
fn failed_rerun_keeps_previous_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pairs.jsonl");
    run_ok(&["curate", "--in", s(&submissions()), "--out", s(&out)]);
    let before = std::fs::read(&out).unwrap();
    let r = run(&["curate", "--in", s(&submissions()), "--out", s(&out), "--factor", "0.5"]);
    assert_ne!(r.code, 0);
    assert_eq!(std::fs::read(&out).unwrap(), before);
}

#[test]
fn missing_compiler_is_environment_error() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    run_ok(&["curate", "--in", s(&submissions()), "--out", s(&pairs)]);
    let candidates = dir.path().join("candidates.jsonl");
    let first = &records(&pairs)[0];
    let line = serde_json::json!({"pair_id": first["pair_id"], "code": "int main(){}"});
    std::fs::write(&candidates, format!("{line}\n")).unwrap();
    let out = dir.path().join("results.jsonl");
    let r = run(&[
        "eval",
        "--pairs",
        s(&pairs),
        "--candidates",
        s(&candidates),
        "--tests",
        s(&fixtures().join("pipeline/tests")),
        "--compile-command",
        "no-such-compiler-xyz {src} -o {out}",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("no-such-compiler-xyz"), "{}", r.stderr);
    assert!(!out.exists());
}

#[test]
fn unreachable_endpoint_is_remote_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plans.jsonl");
    let r = run(&[
        "plan",
        "--programs",
        s(&orchestration_dir().join("programs.jsonl")),
        "--endpoint",
        "http://127.0.0.1:1/v1",
        "--model",
        "planner",
        "--max-retries",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert!(!out.exists());
}

#[test]
fn config_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from_config.jsonl");
    let config = dir.path().join("perfforge.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 11\n[paths]\nsubmissions = {:?}\npairs = {:?}\n[curate]\nmin_speedup = 100.0\n",
            s(&submissions()),
            s(&out)
        ),
    )
    .unwrap();

    let summary = run_ok(&["--config", s(&config), "curate"]);
    assert!(summary.contains("\"pairs\":0"), "{summary}");
    let header = std::fs::read_to_string(&out).unwrap();
    assert!(header.contains("\"seed\":11"), "{header}");

    let summary = run_ok(&["--config", s(&config), "--seed", "5", "curate", "--min-speedup", "1.1"]);
    assert!(summary.contains("\"pairs\":13"), "{summary}");
    assert!(std::fs::read_to_string(&out).unwrap().contains("\"seed\":5"));
}

#[test]
fn config_with_shared_paths_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("perfforge.toml");
    std::fs::write(&config, "[paths]\npairs = \"x.jsonl\"\nresults = \"x.jsonl\"\n").unwrap();
    let r = run(&["--config", s(&config), "curate"]);
    assert_eq!(r.code, 1);
    assert!(
        r.stderr.contains("paths.pairs") && r.stderr.contains("paths.results"),
        "{}",
        r.stderr
    );

    std::fs::write(&config, "[curate]\nfactr = 2.0\n").unwrap();
    assert_eq!(run(&["--config", s(&config), "curate"]).code, 1);
}

#[test]
fn annotate_respects_concurrency_limit() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    run_ok(&["curate", "--in", s(&submissions()), "--out", s(&pairs)]);
    let mut config = mock_config(&fixtures().join("pipeline/annotate_mock.json"));
    for rule in &mut config.rules {
        rule.delay_ms = 50;
    }
    let mock = Mock::start(config);
    let out = dir.path().join("annotated.jsonl");
    run_ok(&[
        "annotate",
        "--pairs",
        s(&pairs),
        "--endpoint",
        &mock.url(),
        "--model",
        "extractor",
        "--concurrency",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(mock.max_in_flight(), 2);
    assert_eq!(records(&out).len(), 13);
}

#[test]
fn serve_mock_prints_url_and_answers() {
    let dir = tempfile::tempdir().unwrap();
    let rules = dir.path().join("rules.json");
    let config = MockConfig {
        rules: vec![MockRule {
            model: Some("m".into()),
            reply: "hello".into(),
            ..Default::default()
        }],
        default_reply: None,
    };
    std::fs::write(&rules, serde_json::to_string(&config).unwrap()).unwrap();
    let mut child = command(&["serve-mock", "--rules", s(&rules)])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let announced: serde_json::Value = serde_json::from_str(&line).unwrap();
    let url = announced["url"].as_str().unwrap().to_string();

    let client = HttpChatClient::new(ChatClientConfig::new(url, "m")).unwrap();
    let reply = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap()
        .block_on(client.complete(&ChatCall::new(vec![ChatMessage::user("hi")])));
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(reply.unwrap(), "hello");
}
