//! Moving protocol messages to an adapter and back.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::server::handle_line;
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::seed;

/// Outstanding requests allowed on one connection.
pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

pub trait Transport: Send {
    fn describe(&self) -> String;

    /// The greeting exchange; its reply carries no id.
    fn hello(&mut self, request: &Value) -> Result<Value>;

    /// Send requests, each with a distinct `id`, and return the replies in
    /// request order.
    fn exchange(&mut self, requests: &[Value]) -> Result<Vec<Value>>;
}

/// A line-oriented connection that may answer out of order.
trait Lines {
    fn send(&mut self, line: String) -> Result<()>;
    fn flush(&mut self) -> Result<()>;
    fn recv(&mut self) -> Result<String>;
}

fn parse_line(line: &str) -> Result<Value> {
    serde_json::from_str(line).map_err(|e| Error::protocol("reply", format!("invalid JSON: {e}")))
}

fn request_id(v: &Value) -> Result<u64> {
    v.get("id").and_then(Value::as_u64).ok_or_else(|| Error::protocol("id", "request has no integer id"))
}

/// Keep up to `window` requests in flight and match replies by id.
fn pipelined(conn: &mut impl Lines, requests: &[Value], window: usize) -> Result<Vec<Value>> {
    let mut slot: HashMap<u64, usize> = HashMap::with_capacity(requests.len());
    for (i, r) in requests.iter().enumerate() {
        if slot.insert(request_id(r)?, i).is_some() {
            return Err(Error::protocol("id", format!("duplicate request id {}", r["id"])));
        }
    }
    let mut replies: Vec<Option<Value>> = vec![None; requests.len()];
    let (mut sent, mut done) = (0, 0);
    while done < requests.len() {
        while sent < requests.len() && sent - done < window.max(1) {
            conn.send(requests[sent].to_string())?;
            sent += 1;
        }
        conn.flush()?;
        let reply = parse_line(&conn.recv()?)?;
        let Some(id) = reply.get("id").and_then(Value::as_u64) else {
            let code = reply.get("code").and_then(Value::as_str).unwrap_or("unknown").to_string();
            let message = reply.get("message").and_then(Value::as_str).unwrap_or("reply without id").to_string();
            return Err(Error::Remote { code, message });
        };
        match slot.remove(&id) {
            Some(i) => {
                replies[i] = Some(reply);
                done += 1;
            }
            None => return Err(Error::protocol("id", format!("reply id {id} matches no outstanding request"))),
        }
    }
    Ok(replies.into_iter().map(|r| r.expect("every slot answered")).collect())
}

/// An adapter running as a child process speaking over stdin/stdout.
pub struct StdioTransport {
    command: String,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    window: usize,
}

impl StdioTransport {
    /// Start `command` through the shell.
    pub fn spawn(command: &str, timeout: Duration, window: usize) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::ModelUnavailable(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(StdioTransport { command: command.into(), child, stdin, lines: rx, timeout, window })
    }
}

impl Lines for StdioTransport {
    fn send(&mut self, line: String) -> Result<()> {
        writeln!(self.stdin, "{line}").map_err(|e| Error::ModelUnavailable(format!("write to adapter: {e}")))
    }

    fn flush(&mut self) -> Result<()> {
        self.stdin.flush().map_err(|e| Error::ModelUnavailable(format!("write to adapter: {e}")))
    }

    fn recv(&mut self) -> Result<String> {
        loop {
            match self.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) if line.trim().is_empty() => continue,
                Ok(Ok(line)) => return Ok(line),
                Ok(Err(e)) => return Err(Error::ModelUnavailable(format!("read from adapter: {e}"))),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::ModelUnavailable(format!("no reply within {:?}", self.timeout)))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::ModelUnavailable("adapter closed its output".into()))
                }
            }
        }
    }
}

impl Transport for StdioTransport {
    fn describe(&self) -> String {
        format!("stdio:{}", self.command)
    }

    fn hello(&mut self, request: &Value) -> Result<Value> {
        self.send(request.to_string())?;
        self.flush()?;
        parse_line(&self.recv()?)
    }

    fn exchange(&mut self, requests: &[Value]) -> Result<Vec<Value>> {
        let window = self.window;
        pipelined(self, requests, window)
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// An adapter behind `POST <base>/v1/<type>`. One request per round trip.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build();
        HttpTransport { base: base.trim_end_matches('/').to_string(), agent: config.into() }
    }

    fn post(&self, request: &Value) -> Result<Value> {
        let kind = request.get("type").and_then(Value::as_str).unwrap_or("").trim_end_matches('?');
        let url = format!("{}/v1/{kind}", self.base);
        let mut response = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(request.to_string())
            .map_err(|e| Error::ModelUnavailable(format!("{url}: {e}")))?;
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::ModelUnavailable(format!("{url}: {e}")))?;
        parse_line(&body)
    }
}

impl Transport for HttpTransport {
    fn describe(&self) -> String {
        format!("http:{}", self.base)
    }

    fn hello(&mut self, request: &Value) -> Result<Value> {
        self.post(request)
    }

    fn exchange(&mut self, requests: &[Value]) -> Result<Vec<Value>> {
        requests
            .iter()
            .map(|r| {
                let reply = self.post(r)?;
                match (reply.get("id").and_then(Value::as_u64), r.get("id").and_then(Value::as_u64)) {
                    (Some(a), Some(b)) if a == b => Ok(reply),
                    (None, _) if reply.get("type").and_then(Value::as_str) == Some("error") => Err(Error::Remote {
                        code: reply["code"].as_str().unwrap_or("unknown").into(),
                        message: reply["message"].as_str().unwrap_or("").into(),
                    }),
                    (got, want) => Err(Error::protocol("id", format!("reply id {got:?} for request {want:?}"))),
                }
            })
            .collect()
    }
}

/// An in-process server behind the line protocol, optionally answering in a
/// seeded random order. Used for loopback checks and tests.
pub struct LoopbackTransport {
    model: ModelHandle,
    queue: Vec<String>,
    shuffle: Option<ChaCha8Rng>,
    window: usize,
}

impl LoopbackTransport {
    pub fn new(model: ModelHandle) -> Self {
        LoopbackTransport { model, queue: Vec::new(), shuffle: None, window: DEFAULT_WINDOW }
    }

    /// Answer outstanding requests in a random order.
    pub fn shuffled(mut self, seed: u64) -> Self {
        self.shuffle = Some(seed::rng(seed, "loopback-order", 0));
        self
    }

    pub fn window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }
}

impl Lines for LoopbackTransport {
    fn send(&mut self, line: String) -> Result<()> {
        self.queue.push(handle_line(self.model.as_ref(), &line));
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }

    fn recv(&mut self) -> Result<String> {
        if self.queue.is_empty() {
            return Err(Error::ModelUnavailable("no reply pending".into()));
        }
        let i = match &mut self.shuffle {
            Some(rng) => rng.random_range(0..self.queue.len()),
            None => 0,
        };
        Ok(self.queue.remove(i))
    }
}

impl Transport for LoopbackTransport {
    fn describe(&self) -> String {
        format!("loopback:{}", self.model.id())
    }

    fn hello(&mut self, request: &Value) -> Result<Value> {
        parse_line(&handle_line(self.model.as_ref(), &request.to_string()))
    }

    fn exchange(&mut self, requests: &[Value]) -> Result<Vec<Value>> {
        let window = self.window;
        pipelined(self, requests, window)
    }
}
