//! External models over a newline-delimited JSON protocol.
//!
//! The engine greets the adapter with `hello?`, learns its class count, mask
//! token and capabilities, and from then on issues `predict`,
//! `predict_batch`, `grad_dot` and `attention` requests tagged with integer
//! ids. Replies may arrive out of order. Transports: a child process on
//! stdin/stdout, or HTTP (`POST /v1/<type>`).

mod conformance;
mod protocol;
mod server;
mod transport;

use std::sync::Mutex;
use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{AttentionMap, Capabilities, Model, Prediction};

pub use conformance::{check_conformance, Check, ConformanceReport, GRAD_DOT_TOLERANCE};
pub use protocol::{
    attention_from_wire, decode_alignment, encode_alignment, hello_reply, parse_hello, HelloInfo, Reply, Request,
    CODE_BAD_REQUEST, CODE_MODEL, CODE_UNKNOWN_TYPE, CODE_UNSUPPORTED, PROTOCOL_VERSION,
};
pub use server::{handle, handle_line, handle_value, serve_lines, HttpServer};
pub use transport::{HttpTransport, LoopbackTransport, StdioTransport, Transport, DEFAULT_TIMEOUT, DEFAULT_WINDOW};

/// Sequences per `predict_batch` request when splitting large batches.
pub const BATCH_CHUNK: usize = 64;

/// Where an adapter lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Stdio(String),
    Http(String),
}

impl Endpoint {
    /// Parse `stdio:<command>` or `http:<url>`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("stdio endpoint needs a command".into()));
            }
            return Ok(Endpoint::Stdio(cmd.into()));
        }
        if let Some(url) = s.strip_prefix("http:") {
            let url = if url.starts_with("//") { format!("http:{url}") } else { url.to_string() };
            if !url.starts_with("http://") {
                return Err(Error::Config(format!("http endpoint needs an http:// URL, got {url:?}")));
            }
            return Ok(Endpoint::Http(url));
        }
        Err(Error::Config(format!("unknown adapter endpoint {s:?}; expected stdio:<cmd> or http:<url>")))
    }

    pub fn open(&self, timeout: Duration, window: usize) -> Result<Box<dyn Transport>> {
        Ok(match self {
            Endpoint::Stdio(cmd) => Box::new(StdioTransport::spawn(cmd, timeout, window)?),
            Endpoint::Http(url) => Box::new(HttpTransport::new(url, timeout)),
        })
    }
}

/// A session: transport plus request id counter.
pub struct Client {
    transport: Box<dyn Transport>,
    next_id: u64,
}

impl Client {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Client { transport, next_id: 1 }
    }

    pub fn describe(&self) -> String {
        self.transport.describe()
    }

    pub fn hello(&mut self) -> Result<HelloInfo> {
        let reply = self.transport.hello(&Request::Hello { version: PROTOCOL_VERSION }.to_value())?;
        parse_hello(&reply)
    }

    /// Send raw request objects, assigning fresh ids.
    pub fn raw(&mut self, mut requests: Vec<Value>) -> Result<Vec<Value>> {
        for r in &mut requests {
            r["id"] = Value::from(self.next_id);
            self.next_id += 1;
        }
        self.transport.exchange(&requests)
    }

    pub fn call(&mut self, requests: Vec<Request>) -> Result<Vec<Reply>> {
        let kinds: Vec<&'static str> = requests.iter().map(Request::kind).collect();
        let values = self.raw(requests.iter().map(Request::to_value).collect())?;
        values
            .into_iter()
            .zip(kinds)
            .map(|(v, kind)| match Reply::from_value(v)? {
                Reply::Error { code, message, .. } => Err(remote_error(kind, code, message)),
                r => Ok(r),
            })
            .collect()
    }
}

fn remote_error(kind: &'static str, code: String, message: String) -> Error {
    if code == CODE_UNSUPPORTED {
        Error::UnsupportedCapability(kind)
    } else {
        Error::Remote { code, message }
    }
}

fn unexpected(reply: &Reply, wanted: &str) -> Error {
    let got = reply.to_value()["type"].as_str().unwrap_or("?").to_string();
    Error::protocol("type", format!("expected a {wanted} reply, got {got}"))
}

/// A model reached through an adapter. Calls are serialized on one session.
pub struct AdapterModel {
    id: String,
    info: HelloInfo,
    client: Mutex<Client>,
}

impl AdapterModel {
    pub fn connect(transport: Box<dyn Transport>) -> Result<Self> {
        let mut client = Client::new(transport);
        let info = client.hello()?;
        Ok(AdapterModel { id: format!("adapter:{}", client.describe()), info, client: Mutex::new(client) })
    }

    pub fn open(endpoint: &Endpoint, timeout: Duration, window: usize) -> Result<Self> {
        Self::connect(endpoint.open(timeout, window)?)
    }

    pub fn info(&self) -> &HelloInfo {
        &self.info
    }

    fn call(&self, requests: Vec<Request>) -> Result<Vec<Reply>> {
        self.client.lock().map_err(|_| Error::ModelUnavailable("session poisoned".into()))?.call(requests)
    }

    fn check_probs(&self, probs: Vec<f64>) -> Result<Prediction> {
        if probs.len() != self.info.classes {
            return Err(Error::protocol("probs", format!("{} classes, handshake said {}", probs.len(), self.info.classes)));
        }
        Prediction::from_probs(probs)
    }
}

impl Model for AdapterModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> usize {
        self.info.classes
    }

    fn mask_token(&self) -> &str {
        &self.info.mask_token
    }

    fn capabilities(&self) -> Capabilities {
        self.info.capabilities
    }

    fn thread_safe(&self) -> bool {
        false
    }

    fn predict(&self, tokens: &[String]) -> Result<Prediction> {
        match self.call(vec![Request::Predict { id: 0, tokens: tokens.to_vec() }])?.pop() {
            Some(Reply::Prediction { probs, .. }) => self.check_probs(probs),
            Some(r) => Err(unexpected(&r, "prediction")),
            None => Err(Error::protocol("reply", "missing")),
        }
    }

    fn predict_batch(&self, batch: &[Vec<String>]) -> Result<Vec<Prediction>> {
        let requests = batch.chunks(BATCH_CHUNK).map(|c| Request::PredictBatch { id: 0, batch: c.to_vec() }).collect();
        let mut out = Vec::with_capacity(batch.len());
        for (reply, chunk) in self.call(requests)?.into_iter().zip(batch.chunks(BATCH_CHUNK)) {
            match reply {
                Reply::PredictionBatch { probs, .. } if probs.len() == chunk.len() => {
                    for p in probs {
                        out.push(self.check_probs(p)?);
                    }
                }
                Reply::PredictionBatch { probs, .. } => {
                    return Err(Error::protocol("probs", format!("{} rows for {} inputs", probs.len(), chunk.len())))
                }
                r => return Err(unexpected(&r, "prediction_batch")),
            }
        }
        Ok(out)
    }

    fn grad_dot(&self, tokens: &[String], baseline: &[String], alpha: f64, target: usize) -> Result<Vec<f64>> {
        if !self.info.capabilities.grad_dot {
            return Err(Error::UnsupportedCapability("grad_dot"));
        }
        let req = Request::GradDot { id: 0, tokens: tokens.to_vec(), baseline: baseline.to_vec(), alpha, target };
        match self.call(vec![req])?.pop() {
            Some(Reply::GradDot { values, .. }) if values.len() == tokens.len() => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::protocol("values", "non-finite gradient"));
                }
                Ok(values)
            }
            Some(Reply::GradDot { values, .. }) => {
                Err(Error::protocol("values", format!("{} values for {} tokens", values.len(), tokens.len())))
            }
            Some(r) => Err(unexpected(&r, "grad_dot")),
            None => Err(Error::protocol("reply", "missing")),
        }
    }

    fn attention(&self, tokens: &[String]) -> Result<AttentionMap> {
        if !self.info.capabilities.attention {
            return Err(Error::UnsupportedCapability("attention"));
        }
        match self.call(vec![Request::Attention { id: 0, tokens: tokens.to_vec() }])?.pop() {
            Some(Reply::Attention { heads, alignment, .. }) => attention_from_wire(heads, &alignment),
            Some(r) => Err(unexpected(&r, "attention")),
            None => Err(Error::protocol("reply", "missing")),
        }
    }
}
