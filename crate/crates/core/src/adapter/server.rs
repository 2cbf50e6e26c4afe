//! Serving any [`Model`] over the protocol: one reply per request line.

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::Value;

use super::protocol::{
    encode_alignment, hello_reply, Reply, Request, CODE_BAD_REQUEST, CODE_MODEL, CODE_UNKNOWN_TYPE,
    CODE_UNSUPPORTED,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelHandle};

const KNOWN: [&str; 5] = ["hello?", "predict", "predict_batch", "grad_dot", "attention"];

fn error_reply(id: Option<u64>, e: Error) -> Reply {
    let code = match e {
        Error::UnsupportedCapability(_) => CODE_UNSUPPORTED,
        Error::Contract(_) | Error::Capacity { .. } => CODE_BAD_REQUEST,
        _ => CODE_MODEL,
    };
    Reply::error(id, code, e.to_string())
}

/// Answer one decoded request.
pub fn handle(model: &dyn Model, request: Request) -> Reply {
    let answer = |id: u64, r: Result<Reply>| r.unwrap_or_else(|e| error_reply(Some(id), e));
    match request {
        Request::Hello { .. } => hello_reply(model.classes(), model.mask_token(), model.capabilities()),
        Request::Predict { id, tokens } => {
            answer(id, model.predict(&tokens).map(|p| Reply::Prediction { id, probs: p.probs }))
        }
        Request::PredictBatch { id, batch } => answer(
            id,
            model
                .predict_batch(&batch)
                .map(|ps| Reply::PredictionBatch { id, probs: ps.into_iter().map(|p| p.probs).collect() }),
        ),
        Request::GradDot { id, tokens, baseline, alpha, target } => {
            let gated = if model.capabilities().grad_dot {
                model.grad_dot(&tokens, &baseline, alpha, target)
            } else {
                Err(Error::UnsupportedCapability("grad_dot"))
            };
            answer(id, gated.map(|values| Reply::GradDot { id, values }))
        }
        Request::Attention { id, tokens } => {
            let gated = if model.capabilities().attention {
                model.attention(&tokens)
            } else {
                Err(Error::UnsupportedCapability("attention"))
            };
            answer(
                id,
                gated.map(|m| Reply::Attention { id, alignment: encode_alignment(&m.alignment), heads: m.heads }),
            )
        }
    }
}

/// Answer one raw request object. Never fails: malformed input produces an
/// error reply.
pub fn handle_value(model: &dyn Model, v: Value) -> Value {
    let id = v.get("id").and_then(Value::as_u64);
    let kind = v.get("type").and_then(Value::as_str).map(str::to_string);
    let reply = match kind.as_deref() {
        None => Reply::error(id, CODE_BAD_REQUEST, "missing request type"),
        Some(t) if !KNOWN.contains(&t) => Reply::error(id, CODE_UNKNOWN_TYPE, format!("unknown request type {t:?}")),
        Some(_) => match serde_json::from_value::<Request>(v) {
            Ok(req) => handle(model, req),
            Err(e) => Reply::error(id, CODE_BAD_REQUEST, e.to_string()),
        },
    };
    reply.to_value()
}

pub fn handle_line(model: &dyn Model, line: &str) -> String {
    let reply = match serde_json::from_str::<Value>(line) {
        Ok(v) => handle_value(model, v),
        Err(e) => Reply::error(None, CODE_BAD_REQUEST, format!("invalid JSON: {e}")).to_value(),
    };
    reply.to_string()
}

/// Serve newline-delimited requests until the input closes.
pub fn serve_lines(model: &dyn Model, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", handle_line(model, &line))?;
        output.flush()?;
    }
    Ok(())
}

/// A protocol server on a local HTTP port, answering `POST /v1/<type>`.
/// Stops when dropped.
pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
    pub url: String,
}

impl HttpServer {
    pub fn start(model: ModelHandle, addr: &str) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::ModelUnavailable(format!("bind {addr}: {e}")))?;
        let server = Arc::new(server);
        let url = match server.server_addr().to_ip() {
            Some(a) => format!("http://{a}"),
            None => return Err(Error::ModelUnavailable(format!("{addr} is not an IP address"))),
        };
        let worker = server.clone();
        let thread = std::thread::spawn(move || {
            for mut request in worker.incoming_requests() {
                let mut body = String::new();
                let reply = match request.as_reader().read_to_string(&mut body) {
                    Ok(_) => http_reply(model.as_ref(), request.method(), request.url(), &body),
                    Err(e) => Reply::error(None, CODE_BAD_REQUEST, e.to_string()).to_value().to_string(),
                };
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
                let _ = request.respond(tiny_http::Response::from_string(reply).with_header(header));
            }
        });
        Ok(HttpServer { server, thread: Some(thread), url })
    }

    /// Block until the server stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn http_reply(model: &dyn Model, method: &tiny_http::Method, url: &str, body: &str) -> String {
    if *method != tiny_http::Method::Post {
        return Reply::error(None, CODE_BAD_REQUEST, "use POST").to_value().to_string();
    }
    let Some(kind) = url.strip_prefix("/v1/") else {
        return Reply::error(None, CODE_BAD_REQUEST, format!("unknown path {url}")).to_value().to_string();
    };
    let v: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return Reply::error(None, CODE_BAD_REQUEST, format!("invalid JSON: {e}")).to_value().to_string(),
    };
    // the greeting's type carries a trailing '?', which cannot appear in a path
    let declared = v.get("type").and_then(Value::as_str).unwrap_or("");
    if declared.trim_end_matches('?') != kind {
        let id = v.get("id").and_then(Value::as_u64);
        return Reply::error(id, CODE_BAD_REQUEST, format!("path /v1/{kind} does not match type {declared:?}"))
            .to_value()
            .to_string();
    }
    handle_value(model, v).to_string()
}
