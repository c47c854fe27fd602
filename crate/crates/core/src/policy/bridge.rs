//! Newline-delimited JSON bridge to an external policy process.
//!
//! Request, one line per control step:
//!
//! ```json
//! {"t": 0.01, "x": [0.0, 0.0, 0.0], "last_reward": -1.2, "done": false}
//! ```
//!
//! Response, one line:
//!
//! ```json
//! {"u": [0.5, 0.0]}
//! ```
//!
//! The final request of an episode carries `"done": true`; its reply is read
//! and discarded so the peer stays in lock step.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("no reply within {timeout_ms} ms")]
    Timeout { timeout_ms: u64 },
    #[error("malformed reply {line:?}: {reason}")]
    Parse { line: String, reason: String },
    #[error("reply has {actual} inputs, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("i/o: {0}")]
    Io(String),
    #[error("peer closed the stream")]
    Closed,
}

#[derive(Debug, Serialize)]
pub struct StepRequest<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub last_reward: f64,
    pub done: bool,
}

#[derive(Debug, Deserialize)]
pub struct StepResponse {
    pub u: Vec<f64>,
}

/// Exchange counters, for throughput logging.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct BridgeStats {
    pub exchanges: u64,
    pub busy: Duration,
}

impl BridgeStats {
    pub fn exchanges_per_second(&self) -> f64 {
        let s = self.busy.as_secs_f64();
        if s > 0.0 {
            self.exchanges as f64 / s
        } else {
            0.0
        }
    }
}

/// Synchronous request/response channel. Replies are read on a helper thread
/// so a silent peer surfaces as [`BridgeError::Timeout`] instead of a hang.
pub struct PolicyBridge {
    writer: Box<dyn Write + Send>,
    replies: Receiver<std::io::Result<String>>,
    timeout: Duration,
    inputs: usize,
    child: Option<Child>,
    stats: BridgeStats,
}

impl std::fmt::Debug for PolicyBridge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyBridge")
            .field("timeout", &self.timeout)
            .field("inputs", &self.inputs)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

impl PolicyBridge {
    pub fn new<R, W>(reader: R, writer: W, inputs: usize, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Self {
            writer: Box::new(writer),
            replies: rx,
            timeout,
            inputs,
            child: None,
            stats: BridgeStats::default(),
        }
    }

    /// Spawns `program args…` and talks to it over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String], inputs: usize, timeout: Duration) -> Result<Self, BridgeError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BridgeError::Io(format!("spawning {program}: {e}")))?;
        let stdin = child.stdin.take().ok_or(BridgeError::Closed)?;
        let stdout = child.stdout.take().ok_or(BridgeError::Closed)?;
        let mut bridge = Self::new(stdout, stdin, inputs, timeout);
        bridge.child = Some(child);
        Ok(bridge)
    }

    pub fn stats(&self) -> BridgeStats {
        self.stats
    }

    pub fn exchange(&mut self, t: f64, x: &[f64], last_reward: f64, done: bool) -> Result<Vec<f64>, BridgeError> {
        let started = Instant::now();
        let request = StepRequest { t, x, last_reward, done };
        let mut line = serde_json::to_string(&request).map_err(|e| BridgeError::Io(e.to_string()))?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::BrokenPipe => BridgeError::Closed,
                _ => BridgeError::Io(e.to_string()),
            })?;

        let reply = match self.replies.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(BridgeError::Io(e.to_string())),
            Err(RecvTimeoutError::Timeout) => {
                return Err(BridgeError::Timeout {
                    timeout_ms: self.timeout.as_millis() as u64,
                })
            }
            Err(RecvTimeoutError::Disconnected) => return Err(BridgeError::Closed),
        };
        let parsed: StepResponse = serde_json::from_str(reply.trim()).map_err(|e| BridgeError::Parse {
            line: reply.clone(),
            reason: e.to_string(),
        })?;
        if parsed.u.len() != self.inputs {
            return Err(BridgeError::DimensionMismatch {
                expected: self.inputs,
                actual: parsed.u.len(),
            });
        }
        if parsed.u.iter().any(|v| !v.is_finite()) {
            return Err(BridgeError::Parse {
                line: reply,
                reason: "non-finite input".into(),
            });
        }
        self.stats.exchanges += 1;
        self.stats.busy += started.elapsed();
        Ok(parsed.u)
    }
}

impl Drop for PolicyBridge {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
