//! NDJSON policy bridge: scripted in-process peers and real subprocesses.

use std::io::{pipe, BufRead, BufReader, Write};
use std::thread;
use std::time::Duration;

use dobcbf::envs::PlantKind;
use dobcbf::harness::{run_experiment_with, ExperimentConfig};
use dobcbf::par::Execution;
use dobcbf::policy::{BridgeError, PolicyBridge, PolicySpec};
use serde_json::Value;

/// Bridge wired to a thread that answers each request with `reply(request)`.
/// `None` makes the peer go silent.
fn scripted<F>(inputs: usize, timeout: Duration, reply: F) -> PolicyBridge
where
    F: Fn(&Value) -> Option<String> + Send + 'static,
{
    let (req_rx, req_tx) = pipe().unwrap();
    let (rep_rx, mut rep_tx) = pipe().unwrap();
    thread::spawn(move || {
        for line in BufReader::new(req_rx).lines() {
            let Ok(line) = line else { break };
            let req: Value = serde_json::from_str(&line).unwrap();
            match reply(&req) {
                Some(r) => {
                    if writeln!(rep_tx, "{r}").is_err() {
                        break;
                    }
                }
                None => thread::sleep(Duration::from_secs(1)),
            }
        }
    });
    PolicyBridge::new(rep_rx, req_tx, inputs, timeout)
}

#[test]
fn echo_peer_returns_zero_inputs() {
    let mut b = scripted(2, Duration::from_secs(1), |_| Some(r#"{"u": [0.0, 0.0]}"#.into()));
    for k in 0..10 {
        let u = b.exchange(k as f64 * 0.01, &[0.0, 1.0, 2.0], -1.0, false).unwrap();
        assert_eq!(u, vec![0.0, 0.0]);
    }
    assert_eq!(b.stats().exchanges, 10);
}

#[test]
fn request_carries_the_documented_fields() {
    let mut b = scripted(1, Duration::from_secs(1), |req| {
        let ok = req["t"].as_f64() == Some(0.25)
            && req["x"] == serde_json::json!([1.0, -2.0])
            && req["last_reward"].as_f64() == Some(-0.5)
            && req["done"] == Value::Bool(true);
        Some(format!(r#"{{"u": [{}]}}"#, if ok { 1.0 } else { -1.0 }))
    });
    assert_eq!(b.exchange(0.25, &[1.0, -2.0], -0.5, true).unwrap(), vec![1.0]);
}

#[test]
fn wrong_width_is_a_dimension_error() {
    let mut b = scripted(2, Duration::from_secs(1), |_| Some(r#"{"u": [0.1, 0.2, 0.3]}"#.into()));
    match b.exchange(0.0, &[0.0], 0.0, false) {
        Err(e @ BridgeError::DimensionMismatch { expected: 2, actual: 3 }) => {
            let msg = e.to_string();
            assert!(msg.contains('2') && msg.contains('3'), "{msg}");
        }
        other => panic!("expected a dimension mismatch, got {other:?}"),
    }
}

#[test]
fn malformed_reply_is_a_parse_error() {
    for bad in ["not json", r#"{"v": [1.0]}"#, r#"{"u": "fast"}"#] {
        let mut b = scripted(1, Duration::from_secs(1), move |_| Some(bad.into()));
        assert!(matches!(b.exchange(0.0, &[0.0], 0.0, false), Err(BridgeError::Parse { .. })), "{bad}");
    }
}

#[test]
fn silent_peer_times_out() {
    let mut b = scripted(1, Duration::from_millis(50), |_| None);
    assert!(matches!(
        b.exchange(0.0, &[0.0], 0.0, false),
        Err(BridgeError::Timeout { timeout_ms: 50 })
    ));
}

#[test]
fn ten_thousand_step_soak() {
    let mut b = scripted(2, Duration::from_secs(2), |req| {
        let x0 = req["x"][0].as_f64().unwrap();
        Some(format!(r#"{{"u": [{}, {}]}}"#, -x0, 0.5 * x0))
    });
    let mut errors = 0;
    for k in 0..10_000 {
        let x = k as f64 * 1e-4;
        match b.exchange(k as f64 * 0.01, &[x, 0.0, 0.0], 0.0, k == 9_999) {
            Ok(u) if u == vec![-x, 0.5 * x] => {}
            _ => errors += 1,
        }
    }
    let stats = b.stats();
    eprintln!(
        "bridge soak: {} exchanges, {:.0} exchanges/s",
        stats.exchanges,
        stats.exchanges_per_second()
    );
    assert_eq!(errors, 0);
    assert_eq!(stats.exchanges, 10_000);
}

#[test]
fn python_subprocess_drives_an_episode() {
    let script = r#"
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"u": [0.2, 0.0]}), flush=True)
"#;
    let b = PolicyBridge::spawn("python3", &["-c".into(), script.into()], 2, Duration::from_secs(5));
    let Ok(mut b) = b else {
        eprintln!("python3 unavailable, skipping");
        return;
    };
    assert_eq!(b.exchange(0.0, &[0.0, 0.0, 0.0], 0.0, false).unwrap(), vec![0.2, 0.0]);

    let mut cfg = ExperimentConfig::defaults(PlantKind::Unicycle);
    cfg.episodes = 2;
    cfg.steps_per_episode = 50;
    cfg.policy = PolicySpec::External {
        command: "python3".into(),
        args: vec!["-c".into(), script.into()],
        timeout_ms: 5_000,
    };
    let report = run_experiment_with(&cfg, Execution::Sequential).unwrap();
    assert!(report.aborted_episodes.is_empty());
    assert_eq!(report.episodes, 2);
}

#[test]
fn misbehaving_subprocess_aborts_episodes_and_counts_them() {
    let script = r#"
import sys
for line in sys.stdin:
    print('{"u": [1.0]}', flush=True)
"#;
    let mut cfg = ExperimentConfig::defaults(PlantKind::Unicycle);
    cfg.episodes = 3;
    cfg.steps_per_episode = 20;
    cfg.policy = PolicySpec::External {
        command: "python3".into(),
        args: vec!["-c".into(), script.into()],
        timeout_ms: 5_000,
    };
    let report = run_experiment_with(&cfg, Execution::Sequential).unwrap();
    assert_eq!(report.aborted_episodes, vec![0, 1, 2]);
}

#[test]
fn missing_program_aborts_episodes() {
    let mut cfg = ExperimentConfig::defaults(PlantKind::Unicycle);
    cfg.episodes = 2;
    cfg.steps_per_episode = 10;
    cfg.policy = PolicySpec::External {
        command: "/nonexistent/policy-binary".into(),
        args: vec![],
        timeout_ms: 100,
    };
    let report = run_experiment_with(&cfg, Execution::Sequential).unwrap();
    assert_eq!(report.aborted_episodes, vec![0, 1]);
}
