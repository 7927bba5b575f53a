//! Line-delimited JSON protocol for external models.
//!
//! ```text
//! → {"hello": {"dimension": d}}            ← {"ok": {"output_dim": n}}
//! → {"eval": {"id": k, "points": [...]}}   ← {"result": {"id": k, "values": [...]}}
//! → {"bye": {}}
//! ```
//!
//! A `null` (or a string such as `"NaN"`) in `values` marks a non-finite
//! output; it is rejected with the index of its point.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use quadcal::model::{check_outputs, CalibrationToy, Model, ModelError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Request {
    Hello { dimension: usize },
    Eval { id: u64, points: Vec<Vec<f64>> },
    Bye {},
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Ok { output_dim: usize },
    Result { id: u64, values: Vec<Vec<Value>> },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("cannot start `{command}`: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("model process I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("model process exited")]
    Exited,
    #[error("no response within {seconds} s")]
    Timeout { seconds: f64 },
    #[error("malformed response `{line}`: {reason}")]
    Malformed { line: String, reason: String },
    #[error("handshake reported output dimension {found}, expected {expected}")]
    OutputDim { expected: usize, found: usize },
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    output_dim: usize,
}

impl Worker {
    fn send(&mut self, request: &Request) -> Result<(), ProtocolError> {
        let line = serde_json::to_string(request).expect("request serializes");
        writeln!(self.stdin, "{line}")?;
        self.stdin.flush()?;
        Ok(())
    }

    fn receive(&self, timeout: Duration) -> Result<Response, ProtocolError> {
        let line = match self.lines.recv_timeout(timeout) {
            Ok(line) => line?,
            Err(RecvTimeoutError::Timeout) => {
                return Err(ProtocolError::Timeout {
                    seconds: timeout.as_secs_f64(),
                })
            }
            Err(RecvTimeoutError::Disconnected) => return Err(ProtocolError::Exited),
        };
        serde_json::from_str(&line).map_err(|e| ProtocolError::Malformed {
            line: truncate(&line),
            reason: e.to_string(),
        })
    }

    fn shutdown(mut self) {
        let _ = self.send(&Request::Bye {});
        for _ in 0..20 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

/// A model evaluated by an external executable.
///
/// A batch that times out, crashes the process or gets a malformed reply is
/// retried on a fresh process up to `retries` times.
pub struct SubprocessModel {
    command: Vec<String>,
    input_dim: usize,
    output_dim: usize,
    timeout: Duration,
    retries: usize,
    state: Mutex<(Option<Worker>, u64)>,
}

impl SubprocessModel {
    /// Launches the process and completes the handshake. `expected_output`,
    /// when given, must match the dimension the process reports.
    pub fn spawn(
        command: Vec<String>,
        input_dim: usize,
        expected_output: Option<usize>,
        timeout: Duration,
        retries: usize,
    ) -> Result<Self, ProtocolError> {
        let worker = start(&command, input_dim, timeout)?;
        if let Some(e) = expected_output {
            if e != worker.output_dim {
                return Err(ProtocolError::OutputDim {
                    expected: e,
                    found: worker.output_dim,
                });
            }
        }
        Ok(Self {
            command,
            input_dim,
            output_dim: worker.output_dim,
            timeout,
            retries,
            state: Mutex::new((Some(worker), 0)),
        })
    }

    fn attempt(&self, points: &[Vec<f64>]) -> Result<Vec<Vec<Value>>, ProtocolError> {
        let mut guard = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let (slot, next_id) = &mut *guard;
        if slot.is_none() {
            *slot = Some(start(&self.command, self.input_dim, self.timeout)?);
        }
        *next_id += 1;
        let id = *next_id;
        let worker = slot.as_mut().expect("worker present");
        let outcome = worker
            .send(&Request::Eval {
                id,
                points: points.to_vec(),
            })
            .and_then(|()| worker.receive(self.timeout))
            .and_then(|r| match r {
                Response::Result { id: got, values } if got == id => Ok(values),
                other => Err(ProtocolError::Malformed {
                    line: truncate(&format!("{other:?}")),
                    reason: format!("expected result for batch {id}"),
                }),
            });
        if outcome.is_err() {
            // The process may be hung or out of sync; never reuse it.
            if let Some(mut w) = slot.take() {
                let _ = w.child.kill();
                let _ = w.child.wait();
            }
        }
        outcome
    }
}

fn start(command: &[String], dimension: usize, timeout: Duration) -> Result<Worker, ProtocolError> {
    let (program, args) = command.split_first().ok_or_else(|| ProtocolError::Spawn {
        command: String::new(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
    })?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|source| ProtocolError::Spawn {
            command: command.join(" "),
            source,
        })?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    let mut worker = Worker {
        child,
        stdin,
        lines: rx,
        output_dim: 0,
    };
    worker.send(&Request::Hello { dimension })?;
    match worker.receive(timeout) {
        Ok(Response::Ok { output_dim }) => {
            worker.output_dim = output_dim;
            Ok(worker)
        }
        Ok(other) => {
            worker.shutdown();
            Err(ProtocolError::Malformed {
                line: truncate(&format!("{other:?}")),
                reason: "expected handshake reply".into(),
            })
        }
        Err(e) => {
            let _ = worker.child.kill();
            let _ = worker.child.wait();
            Err(e)
        }
    }
}

fn value_to_f64(v: &Value) -> f64 {
    match v {
        Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
        Value::String(s) => s.parse().unwrap_or(f64::NAN),
        _ => f64::NAN,
    }
}

impl Model<f64> for SubprocessModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>, String> {
        self.evaluate_batch(&[x.to_vec()])
            .map(|mut v| v.remove(0))
            .map_err(|e| e.to_string())
    }

    fn evaluate_batch(&self, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        check_outputs::<f64>(points, &[], self.input_dim, self.output_dim)?;
        let mut last = None;
        for _ in 0..=self.retries {
            match self.attempt(points) {
                Ok(values) => {
                    if values.len() != points.len() {
                        return Err(ModelError::Failed {
                            index: values.len().min(points.len().saturating_sub(1)),
                            message: format!("expected {} value rows, got {}", points.len(), values.len()),
                        });
                    }
                    let out: Vec<Vec<f64>> = values.iter().map(|row| row.iter().map(value_to_f64).collect()).collect();
                    check_outputs(points, &out, self.input_dim, self.output_dim)?;
                    return Ok(out);
                }
                Err(e) => last = Some(e),
            }
        }
        let indices: Vec<usize> = (0..points.len()).collect();
        Err(ModelError::Failed {
            index: 0,
            message: format!(
                "{} (after {} attempts; points {:?})",
                last.expect("at least one attempt"),
                self.retries + 1,
                indices
            ),
        })
    }
}

impl Drop for SubprocessModel {
    fn drop(&mut self) {
        let guard = self.state.get_mut().unwrap_or_else(|p| p.into_inner());
        if let Some(w) = guard.0.take() {
            w.shutdown();
        }
    }
}

/// Behaviour of the builtin protocol server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ServeKind {
    /// Returns each point unchanged.
    Echo,
    /// Returns `null` for every coordinate.
    Nan,
    /// The builtin calibration toy on its default locations.
    Toy,
    /// Never answers evaluation requests.
    Hang,
    /// Exits on the first evaluation request.
    Crash,
}

/// Serves the protocol on the given streams until `bye` or end of input.
pub fn serve<R: BufRead, W: Write>(kind: ServeKind, locations: usize, input: R, mut output: W) -> std::io::Result<()> {
    let toy = CalibrationToy::with_uniform_locations(locations);
    let mut dimension = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("serve-model: ignoring malformed request: {e}");
                continue;
            }
        };
        let reply = match request {
            Request::Hello { dimension: d } => {
                dimension = d;
                let output_dim = match kind {
                    ServeKind::Toy => locations,
                    _ => d,
                };
                Response::Ok { output_dim }
            }
            Request::Eval { id, points } => {
                let values = match kind {
                    ServeKind::Hang => {
                        thread::sleep(Duration::from_secs(3600));
                        continue;
                    }
                    ServeKind::Crash => std::process::exit(3),
                    ServeKind::Echo => points.iter().map(|p| p.iter().map(|&v| Value::from(v)).collect()).collect(),
                    ServeKind::Nan => points.iter().map(|_| vec![Value::Null; dimension]).collect(),
                    ServeKind::Toy => points
                        .iter()
                        .map(|p| match Model::<f64>::evaluate(&toy, p) {
                            Ok(v) => v.into_iter().map(Value::from).collect(),
                            Err(_) => vec![Value::Null; locations],
                        })
                        .collect(),
                };
                Response::Result { id, values }
            }
            Request::Bye {} => return Ok(()),
        };
        writeln!(output, "{}", serde_json::to_string(&reply).expect("reply serializes"))?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_server(kind: ServeKind, requests: &[&str]) -> Vec<String> {
        let input = requests.join("\n");
        let mut out = Vec::new();
        serve(kind, 3, input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out).unwrap().lines().map(String::from).collect()
    }

    #[test]
    fn message_shapes() {
        assert_eq!(
            serde_json::to_string(&Request::Hello { dimension: 2 }).unwrap(),
            r#"{"hello":{"dimension":2}}"#
        );
        assert_eq!(serde_json::to_string(&Request::Bye {}).unwrap(), r#"{"bye":{}}"#);
        assert_eq!(
            serde_json::to_string(&Request::Eval {
                id: 4,
                points: vec![vec![0.5]]
            })
            .unwrap(),
            r#"{"eval":{"id":4,"points":[[0.5]]}}"#
        );
    }

    #[test]
    fn server_replies() {
        let r = run_server(
            ServeKind::Echo,
            &[
                r#"{"hello":{"dimension":2}}"#,
                r#"{"eval":{"id":1,"points":[[0.1,0.30000000000000004]]}}"#,
                r#"{"eval":{"id":2,"points":[]}}"#,
                r#"{"bye":{}}"#,
                r#"{"eval":{"id":3,"points":[[0,0]]}}"#,
            ],
        );
        assert_eq!(r[0], r#"{"ok":{"output_dim":2}}"#);
        assert_eq!(r[1], r#"{"result":{"id":1,"values":[[0.1,0.30000000000000004]]}}"#);
        assert_eq!(r[2], r#"{"result":{"id":2,"values":[]}}"#);
        assert_eq!(r.len(), 3);
        let n = run_server(ServeKind::Nan, &[r#"{"hello":{"dimension":1}}"#, r#"{"eval":{"id":1,"points":[[0.2]]}}"#]);
        assert_eq!(n[1], r#"{"result":{"id":1,"values":[[null]]}}"#);
        let t = run_server(ServeKind::Toy, &[r#"{"hello":{"dimension":7}}"#]);
        assert_eq!(t[0], r#"{"ok":{"output_dim":3}}"#);
    }
}
