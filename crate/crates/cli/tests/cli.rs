//! The `dobcbf` binary end to end: outputs, layering and exit codes.

use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn dobcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dobcbf")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let out = dobcbf(&[
        "run",
        "--episodes",
        "3",
        "--steps-per-episode",
        "40",
        "--csv",
        &p("e.csv"),
        "--summary",
        &p("s.json"),
        "--transitions",
        &p("t.ndjson"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_eq!(doc["metrics"]["episodes"], 3);
    assert!(doc["timing"].is_object());
    assert_eq!(fs::read_to_string(p("e.csv")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(p("t.ndjson")).unwrap().lines().count(), 3 * 40);
    let summary: Value = serde_json::from_str(&fs::read_to_string(p("s.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["steps_per_episode"], 40);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "plant = \"quadrotor\"\nepisodes = 50\nsteps_per_episode = 30\nseed = 4\n").unwrap();
    let summary = dir.path().join("s.json");
    let out = dobcbf(&[
        "run",
        "-c",
        cfg.to_str().unwrap(),
        "--episodes",
        "2",
        "--calibration-episodes",
        "2",
        "--summary",
        summary.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s: Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(s["config"]["plant"], "quadrotor");
    assert_eq!(s["config"]["episodes"], 2);
    assert_eq!(s["config"]["steps_per_episode"], 30);
    assert_eq!(s["config"]["seed"], 4);
}

#[test]
fn zero_episodes_succeed() {
    let out = dobcbf(&["run", "--episodes", "0"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["metrics"]["episodes"], 0);
}

#[test]
fn sweep_and_profile_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = dobcbf(&[
        "sweep-error",
        "--plant",
        "quadrotor",
        "--episodes",
        "4",
        "--steps-per-episode",
        "60",
        "--calibration-episodes",
        "2",
        "--checkpoints",
        "0,120",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["rows"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);

    let out = dobcbf(&[
        "profile",
        "--episodes",
        "4",
        "--steps-per-episode",
        "50",
        "--checkpoints",
        "0,100",
        "--window",
        "1",
        "--repeats",
        "1",
        "--sequential",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn certify_bound_passes_with_the_closed_form_bound() {
    let out = dobcbf(&["certify-bound", "--trials", "2", "--horizon", "0.5", "--random-disturbances", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    for key in ["plant", "random_0", "random_1"] {
        assert_eq!(doc[key]["violations"], 0, "{key}");
    }
}

#[test]
fn undersized_bound_fails_certification() {
    let out = dobcbf(&[
        "certify-bound",
        "--bound-mode",
        "empirical",
        "--safety-factor",
        "0.01",
        "--calibration-episodes",
        "2",
        "--steps-per-episode",
        "100",
        "--trials",
        "2",
        "--horizon",
        "1.0",
    ]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_exits_with_config_code() {
    let out = dobcbf(&["run", "--sample-period", "0.0105"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample_period"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "episodez = 3\n").unwrap();
    assert_eq!(code(&dobcbf(&["run", "-c", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&dobcbf(&["run", "--policy", "{\"kind\": \"teleport\"}"])), 2);
}

#[test]
fn unreadable_inputs_and_unwritable_outputs_exit_with_io_code() {
    assert_eq!(code(&dobcbf(&["run", "-c", "/nonexistent/exp.toml"])), 4);
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let target = blocker.join("e.csv");
    let out = dobcbf(&["run", "--episodes", "1", "--steps-per-episode", "5", "--csv", target.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
}

#[test]
fn aborted_episodes_exit_with_abort_code() {
    let out = dobcbf(&[
        "run",
        "--episodes",
        "2",
        "--steps-per-episode",
        "10",
        "--policy",
        r#"{"kind": "external", "command": "/nonexistent/policy", "timeout_ms": 100}"#,
    ]);
    assert_eq!(code(&out), 3);
    assert_eq!(stdout_json(&out)["metrics"]["aborted_episodes"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_usage_is_reported_by_the_parser() {
    let out = dobcbf(&["run", "--episodes", "many"]);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
}
