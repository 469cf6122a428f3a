//! Predictors running in a child process, spoken to with line-delimited JSON
//! over its stdin/stdout.
//!
//! ```text
//! <- {"type":"hello","model":"lstm","history_len":4}
//! -> {"type":"predict","t":12,"H":5,"history":{"0":[[3,4],[3,5]]}}
//! <- {"type":"prediction","predictions":{"0":[[3.0,6.0],...]}}
//! -> {"type":"shutdown"}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use cpsolver_core::grid::{Coord, GridMap};
use cpsolver_core::mapf::AgentId;
use cpsolver_core::prediction::{ObservationHistory, Point, PredictionBundle, PredictionError, Predictor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(1);
/// Interpreters and model loading are slow; the handshake gets longer.
pub const DEFAULT_STARTUP: Duration = Duration::from_secs(20);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub model: String,
    pub history_len: usize,
    /// Agent count of a model trained for a fixed `m`, if it says so.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<usize>,
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    t: usize,
    #[serde(rename = "H")]
    horizon: usize,
    history: &'a BTreeMap<AgentId, Vec<Coord>>,
}

/// Handle to one predictor process. One request is in flight at a time.
pub struct ExternalPredictor {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    hello: Hello,
    name: String,
    deadline: Duration,
    /// Responses owed for requests that missed their deadline; skipped
    /// before reading the next answer.
    stale: usize,
}

fn transport(msg: impl std::fmt::Display) -> PredictionError {
    PredictionError::Transport(msg.to_string())
}

fn schema(msg: impl std::fmt::Display) -> PredictionError {
    PredictionError::Schema(msg.to_string())
}

impl ExternalPredictor {
    /// Starts `program args...` and waits for its `hello`.
    pub fn spawn(command: &[String], deadline: Duration, startup: Duration) -> Result<Self, PredictionError> {
        let (program, args) = command.split_first().ok_or_else(|| transport("empty predictor command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| transport(format!("starting {program}: {e}")))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take();
        let (tx, lines) = mpsc::channel();
        thread::Builder::new()
            .name("predictor-reader".into())
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let failed = line.is_err();
                    if tx.send(line).is_err() || failed {
                        break;
                    }
                }
            })
            .map_err(|e| transport(format!("reader thread: {e}")))?;
        let mut me = Self {
            child,
            stdin,
            lines,
            hello: Hello {
                model: String::new(),
                history_len: 0,
                agents: None,
            },
            name: String::new(),
            deadline,
            stale: 0,
        };
        let first = me.read_line(startup)?;
        let value: Value = serde_json::from_str(&first).map_err(|e| schema(format!("handshake is not JSON: {e}")))?;
        if value.get("type").and_then(Value::as_str) != Some("hello") {
            return Err(schema(format!("expected a hello record first, got {first}")));
        }
        me.hello = serde_json::from_value(value).map_err(|e| schema(format!("handshake: {e}")))?;
        me.name = format!("external:{}", me.hello.model);
        log::info!("predictor {} ready, history {}", me.hello.model, me.hello.history_len);
        Ok(me)
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    pub fn set_deadline(&mut self, deadline: Duration) {
        self.deadline = deadline;
    }

    fn read_line(&mut self, within: Duration) -> Result<String, PredictionError> {
        match self.lines.recv_timeout(within) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(transport(format!("reading predictor output: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(PredictionError::Deadline {
                ms: within.as_millis() as u64,
            }),
            Err(RecvTimeoutError::Disconnected) => Err(transport("predictor closed its output")),
        }
    }

    fn send(&mut self, value: &impl Serialize) -> Result<(), PredictionError> {
        let stdin = self.stdin.as_mut().ok_or_else(|| transport("predictor input already closed"))?;
        let mut line = serde_json::to_vec(value).map_err(schema)?;
        line.push(b'\n');
        stdin
            .write_all(&line)
            .and_then(|()| stdin.flush())
            .map_err(|e| transport(format!("writing to predictor: {e}")))
    }

    /// Sends one raw line and returns the next response line. Used by the
    /// conformance suite to probe error handling.
    pub fn round_trip_raw(&mut self, line: &str) -> Result<String, PredictionError> {
        let stdin = self.stdin.as_mut().ok_or_else(|| transport("predictor input already closed"))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|()| stdin.write_all(b"\n"))
            .and_then(|()| stdin.flush())
            .map_err(|e| transport(format!("writing to predictor: {e}")))?;
        self.await_response()
    }

    fn await_response(&mut self) -> Result<String, PredictionError> {
        let until = Instant::now() + self.deadline;
        loop {
            let left = until.saturating_duration_since(Instant::now());
            let line = match self.read_line(left) {
                Err(PredictionError::Deadline { .. }) => {
                    self.stale += 1;
                    return Err(PredictionError::Deadline {
                        ms: self.deadline.as_millis() as u64,
                    });
                }
                other => other?,
            };
            if line.trim().is_empty() {
                continue;
            }
            if self.stale > 0 {
                self.stale -= 1;
                continue;
            }
            return Ok(line);
        }
    }

    /// Asks the process to exit and waits up to `grace` for it to do so.
    /// Returns `None` if it had to be killed.
    pub fn shutdown(mut self, grace: Duration) -> Option<ExitStatus> {
        self.close(grace)
    }

    fn close(&mut self, grace: Duration) -> Option<ExitStatus> {
        // Input stays open until the grace period ends, so a server that
        // only exits on end of input does not pass for one that honours
        // the message.
        if self.stdin.is_some() {
            let _ = self.send(&serde_json::json!({"type": "shutdown"}));
        }
        let until = Instant::now() + grace;
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => {
                    self.stdin = None;
                    return Some(status);
                }
                Ok(None) if Instant::now() < until => thread::sleep(Duration::from_millis(10)),
                _ => {
                    self.stdin = None;
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return None;
                }
            }
        }
    }
}

impl Drop for ExternalPredictor {
    fn drop(&mut self) {
        self.close(Duration::from_millis(500));
    }
}

/// Parses a `prediction` response and checks it against the request.
pub fn parse_response(
    line: &str,
    issued_at: usize,
    horizon: usize,
    expected: impl IntoIterator<Item = AgentId>,
) -> Result<PredictionBundle, PredictionError> {
    let value: Value = serde_json::from_str(line).map_err(|e| schema(format!("response is not JSON: {e}")))?;
    match value.get("type").and_then(Value::as_str) {
        Some("prediction") => {}
        Some("error") => return Err(schema(format!("predictor reported an error: {line}"))),
        _ => return Err(schema(format!("expected a prediction record, got {line}"))),
    }
    let raw: BTreeMap<String, Vec<[f64; 2]>> = value
        .get("predictions")
        .cloned()
        .map(serde_json::from_value)
        .ok_or_else(|| schema("response has no predictions"))?
        .map_err(|e| schema(format!("predictions: {e}")))?;
    let mut points = BTreeMap::new();
    for (key, pts) in raw {
        let id: AgentId = key.parse().map_err(|_| schema(format!("agent id {key:?} is not an integer")))?;
        points.insert(id, pts.into_iter().map(|[r, c]| Point::new(r, c)).collect());
    }
    let bundle = PredictionBundle {
        issued_at,
        horizon,
        points,
    };
    bundle.validate(expected)?;
    Ok(bundle)
}

impl Predictor for ExternalPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(
        &mut self,
        history: &ObservationHistory,
        _map: &GridMap,
        horizon: usize,
    ) -> Result<PredictionBundle, PredictionError> {
        if horizon == 0 {
            return Err(PredictionError::ZeroHorizon);
        }
        if history.is_empty() {
            return Err(PredictionError::EmptyHistory);
        }
        self.send(&PredictRequest {
            kind: "predict",
            t: history.t(),
            horizon,
            history: history.tracks(),
        })?;
        let line = self.await_response()?;
        parse_response(&line, history.t(), horizon, history.agents())
    }
}

/// One line of the protocol conformance report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<(), String>) -> Check {
    let (passed, detail) = match result {
        Ok(()) => (true, String::new()),
        Err(e) => (false, e),
    };
    Check { name, passed, detail }
}

/// A `prediction` record whose points are finite `[r, c]` pairs. Keys are
/// left as sent, since the agent-set check compares them.
fn shape(line: &str) -> Result<BTreeMap<String, Vec<[f64; 2]>>, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("not JSON: {e}"))?;
    if value.get("type").and_then(Value::as_str) != Some("prediction") {
        return Err(format!("expected a prediction record, got {line}"));
    }
    let predictions = value.get("predictions").cloned().ok_or("no predictions field")?;
    let parsed: BTreeMap<String, Vec<[f64; 2]>> =
        serde_json::from_value(predictions).map_err(|e| format!("predictions: {e}"))?;
    for (id, pts) in &parsed {
        if id.parse::<AgentId>().is_err() {
            return Err(format!("agent id {id:?} is not an integer"));
        }
        if pts.iter().flatten().any(|x| !x.is_finite()) {
            return Err(format!("agent {id}: non-finite point"));
        }
    }
    Ok(parsed)
}

/// Exercises a predictor server: handshake, response schema, H-length,
/// agent-set equality, survival of a malformed request, and clean shutdown.
pub fn conformance_suite(command: &[String], deadline: Duration, startup: Duration) -> Vec<Check> {
    let mut out = Vec::new();
    let mut server = match ExternalPredictor::spawn(command, deadline, startup) {
        Ok(s) => {
            out.push(check("handshake", Ok(())));
            s
        }
        Err(e) => {
            out.push(check("handshake", Err(e.to_string())));
            return out;
        }
    };
    let len = server.hello().history_len.max(2);
    let m = server.hello().agents.unwrap_or(3).max(1);
    // Sparse ids so an echo of 0..m would not pass by accident.
    let tracks: BTreeMap<AgentId, Vec<Coord>> = (0..m)
        .map(|k| (3 * k + 1, (0..len).map(|i| Coord::new(2 + 2 * k, 1 + i)).collect()))
        .collect();
    let history = ObservationHistory::from_tracks(len, 40, tracks);
    let expected: Vec<String> = history.agents().map(|a| a.to_string()).collect();

    let mut replies = Vec::new();
    for horizon in [1, 5] {
        let request = PredictRequest {
            kind: "predict",
            t: history.t(),
            horizon,
            history: history.tracks(),
        };
        let line = serde_json::to_string(&request).expect("request serializes");
        replies.push((horizon, server.round_trip_raw(&line).map_err(|e| e.to_string()).and_then(|l| shape(&l))));
    }
    let all = |f: &dyn Fn(usize, &BTreeMap<String, Vec<[f64; 2]>>) -> Result<(), String>| {
        replies.iter().try_for_each(|(h, r)| match r {
            Ok(p) => f(*h, p),
            Err(e) => Err(format!("H = {h}: {e}")),
        })
    };
    out.push(check("schema", all(&|_, _| Ok(()))));
    out.push(check(
        "horizon-length",
        all(&|h, p| match p.iter().find(|(_, pts)| pts.len() != h) {
            Some((id, pts)) => Err(format!("agent {id}: {} points for H = {h}", pts.len())),
            None => Ok(()),
        }),
    ));
    out.push(check(
        "agent-set",
        all(&|_, p| {
            let got: Vec<&String> = p.keys().collect();
            if got.iter().copied().eq(expected.iter()) {
                Ok(())
            } else {
                Err(format!("sent agents {expected:?}, got {got:?}"))
            }
        }),
    ));

    let malformed = server.round_trip_raw(r#"{"type":"predict","t":"soon"}"#).map_err(|e| e.to_string());
    let recovered = malformed.and_then(|line| {
        let v: Value = serde_json::from_str(&line).map_err(|e| format!("error reply is not JSON: {e}"))?;
        if v.get("type").and_then(Value::as_str) != Some("error") {
            return Err(format!("expected an error record, got {line}"));
        }
        let map = GridMap::open(len + 12, 4 * m + 4).map_err(|e| e.to_string())?;
        server.predict(&history, &map, 2).map(drop).map_err(|e| format!("after an error: {e}"))
    });
    out.push(check("malformed-request", recovered));

    out.push(check(
        "shutdown",
        match server.shutdown(Duration::from_secs(2)) {
            Some(s) if s.success() => Ok(()),
            Some(s) => Err(format!("exited with {s}")),
            None => Err("still running 2 s after shutdown".into()),
        },
    ));
    out
}
