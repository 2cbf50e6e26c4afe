//! Protocol messages. Every message is one JSON object per line; requests
//! other than the greeting carry an integer `id` echoed by the reply.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{AttentionMap, Capabilities};

pub const PROTOCOL_VERSION: u64 = 1;

pub const CODE_UNSUPPORTED: &str = "unsupported_capability";
pub const CODE_BAD_REQUEST: &str = "bad_request";
pub const CODE_UNKNOWN_TYPE: &str = "unknown_type";
pub const CODE_MODEL: &str = "model_error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    #[serde(rename = "hello?")]
    Hello { version: u64 },
    Predict { id: u64, tokens: Vec<String> },
    PredictBatch { id: u64, batch: Vec<Vec<String>> },
    GradDot { id: u64, tokens: Vec<String>, baseline: Vec<String>, alpha: f64, target: usize },
    Attention { id: u64, tokens: Vec<String> },
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::Hello { .. } => "hello",
            Request::Predict { .. } => "predict",
            Request::PredictBatch { .. } => "predict_batch",
            Request::GradDot { .. } => "grad_dot",
            Request::Attention { .. } => "attention",
        }
    }

    pub fn set_id(&mut self, new: u64) {
        match self {
            Request::Hello { .. } => {}
            Request::Predict { id, .. }
            | Request::PredictBatch { id, .. }
            | Request::GradDot { id, .. }
            | Request::Attention { id, .. } => *id = new,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("requests always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reply {
    Hello { version: u64, classes: usize, mask_token: String, capabilities: Vec<String> },
    Prediction { id: u64, probs: Vec<f64> },
    PredictionBatch { id: u64, probs: Vec<Vec<f64>> },
    GradDot { id: u64, values: Vec<f64> },
    Attention { id: u64, heads: Vec<Vec<Vec<f64>>>, alignment: Vec<i64> },
    Error {
        #[serde(default)]
        id: Option<u64>,
        code: String,
        message: String,
    },
}

impl Reply {
    pub fn error(id: Option<u64>, code: &str, message: impl Into<String>) -> Self {
        Reply::Error { id, code: code.into(), message: message.into() }
    }

    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::protocol("reply", e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("replies always serialize")
    }
}

/// Wire form of an attention alignment: non-token positions are `-1`.
pub fn encode_alignment(alignment: &[Option<usize>]) -> Vec<i64> {
    alignment.iter().map(|a| a.map_or(-1, |i| i as i64)).collect()
}

pub fn decode_alignment(wire: &[i64]) -> Result<Vec<Option<usize>>> {
    wire.iter()
        .map(|&a| match a {
            -1 => Ok(None),
            a if a >= 0 => Ok(Some(a as usize)),
            a => Err(Error::protocol("alignment", format!("invalid position {a}"))),
        })
        .collect()
}

pub fn attention_from_wire(heads: Vec<Vec<Vec<f64>>>, alignment: &[i64]) -> Result<AttentionMap> {
    let map = AttentionMap { heads, alignment: decode_alignment(alignment)? };
    map.validate()?;
    Ok(map)
}

/// Negotiated session parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HelloInfo {
    pub version: u64,
    pub classes: usize,
    pub mask_token: String,
    pub capabilities: Capabilities,
}

/// Validate a greeting reply field by field.
pub fn parse_hello(v: &Value) -> Result<HelloInfo> {
    let obj = v.as_object().ok_or_else(|| Error::protocol("hello", "reply is not a JSON object"))?;
    let field = |name: &str| obj.get(name).ok_or_else(|| Error::protocol(name, "missing"));
    match field("type")?.as_str() {
        Some("hello") => {}
        Some("error") => {
            let msg = obj.get("message").and_then(Value::as_str).unwrap_or("");
            return Err(Error::protocol("type", format!("adapter refused the greeting: {msg}")));
        }
        _ => return Err(Error::protocol("type", format!("expected \"hello\", got {}", obj["type"]))),
    }
    let version = field("version")?.as_u64().ok_or_else(|| Error::protocol("version", "not an integer"))?;
    if version != PROTOCOL_VERSION {
        return Err(Error::protocol("version", format!("adapter speaks {version}, engine speaks {PROTOCOL_VERSION}")));
    }
    let classes = field("classes")?.as_u64().ok_or_else(|| Error::protocol("classes", "not an integer"))? as usize;
    if classes < 2 {
        return Err(Error::protocol("classes", format!("need at least 2, got {classes}")));
    }
    let mask_token = field("mask_token")?
        .as_str()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::protocol("mask_token", "not a non-empty string"))?
        .to_string();
    let list = field("capabilities")?.as_array().ok_or_else(|| Error::protocol("capabilities", "not a list"))?;
    let mut caps = Capabilities::default();
    let mut predict = false;
    for c in list {
        match c.as_str() {
            Some("predict") => predict = true,
            Some("grad_dot") => caps.grad_dot = true,
            Some("attention") => caps.attention = true,
            _ => return Err(Error::protocol("capabilities", format!("unknown capability {c}"))),
        }
    }
    if !predict {
        return Err(Error::protocol("capabilities", "predict is mandatory"));
    }
    Ok(HelloInfo { version, classes, mask_token, capabilities: caps })
}

pub fn hello_reply(classes: usize, mask_token: &str, caps: Capabilities) -> Reply {
    Reply::Hello {
        version: PROTOCOL_VERSION,
        classes,
        mask_token: mask_token.into(),
        capabilities: caps.names().into_iter().map(String::from).collect(),
    }
}
