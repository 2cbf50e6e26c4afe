//! Conformance checks for an adapter. Every check runs against the raw
//! replies, so a misbehaving adapter fails a check instead of aborting the run.

use rand::RngExt;
use serde::Serialize;
use serde_json::{json, Value};

use super::protocol::{decode_alignment, HelloInfo, Reply, Request, CODE_UNSUPPORTED};
use super::transport::Transport;
use super::Client;
use crate::error::{Error, Result};
use crate::model::{AttentionMap, PROB_TOLERANCE};
use crate::seed;
use crate::types::Instance;

/// Relative tolerance of the path-integral check on `grad_dot`.
pub const GRAD_DOT_TOLERANCE: f64 = 5e-3;
const GRAD_STEPS: usize = 200;
const PROBE_LIMIT: usize = 16;
const GRAD_PROBES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub endpoint: String,
    pub hello: Option<HelloInfo>,
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Outcome of one check body: `Ok(Ok(detail))` passes, `Ok(Err(detail))`
/// fails, `Err(_)` is a transport or protocol failure.
type Outcome = Result<std::result::Result<String, String>>;

fn record(checks: &mut Vec<Check>, name: &str, outcome: Outcome) {
    let (passed, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(e) => (false, format!("transport: {e}")),
    };
    checks.push(Check { name: name.into(), passed, detail });
}

fn one(client: &mut Client, request: Value) -> Result<Value> {
    Ok(client.raw(vec![request])?.remove(0))
}

fn batch_rows(reply: Value) -> Result<Vec<Vec<f64>>> {
    match Reply::from_value(reply)? {
        Reply::PredictionBatch { probs, .. } => Ok(probs),
        Reply::Error { code, message, .. } => Err(Error::Remote { code, message }),
        other => Err(Error::protocol("type", format!("expected prediction_batch, got {:?}", other.to_value()["type"]))),
    }
}

fn simplex_violation(p: &[f64], classes: usize) -> Option<String> {
    if p.len() != classes {
        return Some(format!("{} probabilities for {classes} classes", p.len()));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Some(format!("negative or non-finite entry in {p:?}"));
    }
    let sum: f64 = p.iter().sum();
    ((sum - 1.0).abs() > PROB_TOLERANCE).then(|| format!("probabilities sum to {sum}"))
}

fn probe_inputs(probe: &[Instance], mask: &str, master: u64) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for (i, x) in probe.iter().take(PROBE_LIMIT).enumerate() {
        let tokens = x.sequence();
        let mut rng = seed::rng(master, "conformance", i as u64);
        let masked = tokens.iter().map(|t| if rng.random::<bool>() { mask.to_string() } else { t.clone() }).collect();
        out.push(tokens);
        out.push(masked);
    }
    out
}

/// Run every check applicable to the adapter's advertised capabilities.
pub fn check_conformance(transport: Box<dyn Transport>, probe: &[Instance], master: u64) -> ConformanceReport {
    let mut client = Client::new(transport);
    let endpoint = client.describe();
    let mut checks = Vec::new();
    let info = match client.hello() {
        Ok(info) => {
            record(&mut checks, "handshake", Ok(Ok(format!("protocol {}, {} classes", info.version, info.classes))));
            info
        }
        Err(e) => {
            record(&mut checks, "handshake", Ok(Err(e.to_string())));
            return ConformanceReport { endpoint, hello: None, checks };
        }
    };
    let inputs = probe_inputs(probe, &info.mask_token, master);
    if inputs.is_empty() {
        record(&mut checks, "probe", Ok(Err("probe dataset is empty".into())));
        return ConformanceReport { endpoint, hello: Some(info), checks };
    }
    let batch = || Request::PredictBatch { id: 0, batch: inputs.clone() }.to_value();

    let first = one(&mut client, batch()).and_then(batch_rows);
    let normalization = first.as_ref().map_err(|e| Error::ModelUnavailable(e.to_string())).map(|rows| {
        if rows.len() != inputs.len() {
            return Err(format!("{} rows for {} inputs", rows.len(), inputs.len()));
        }
        match rows.iter().find_map(|p| simplex_violation(p, info.classes)) {
            Some(v) => Err(v),
            None => Ok(format!("{} probability vectors on the simplex", rows.len())),
        }
    });
    record(&mut checks, "normalization", normalization);

    let determinism = (|| -> Outcome {
        let a = one(&mut client, batch())?;
        let b = one(&mut client, batch())?;
        let same = a.get("probs") == b.get("probs");
        Ok(if same { Ok("repeated batch replies are identical".into()) } else { Err("repeated batch replies differ".into()) })
    })();
    record(&mut checks, "determinism", determinism);

    let consistency = (|| -> Outcome {
        let rows = match &first {
            Ok(r) => r.clone(),
            Err(e) => return Err(Error::ModelUnavailable(e.to_string())),
        };
        let singles: Vec<Value> =
            inputs.iter().map(|t| Request::Predict { id: 0, tokens: t.clone() }.to_value()).collect();
        for (i, reply) in client.raw(singles)?.into_iter().enumerate() {
            let probs = match Reply::from_value(reply)? {
                Reply::Prediction { probs, .. } => probs,
                other => return Ok(Err(format!("predict answered with {}", other.to_value()["type"]))),
            };
            let gap = probs.iter().zip(&rows[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if probs.len() != rows[i].len() || gap > 1e-12 {
                return Ok(Err(format!("input {i}: single and batch predictions differ by {gap:e}")));
            }
        }
        Ok(Ok("single predictions equal batch rows".into()))
    })();
    record(&mut checks, "batch-consistency", consistency);

    let unknown = (|| -> Outcome {
        let reply = one(&mut client, json!({"type": "no_such_request"}))?;
        if reply.get("type").and_then(Value::as_str) != Some("error") {
            return Ok(Err(format!("unknown request answered with {reply}")));
        }
        // the session must survive the bad request
        let after = one(&mut client, Request::Predict { id: 0, tokens: inputs[0].clone() }.to_value())?;
        Ok(match Reply::from_value(after)? {
            Reply::Prediction { .. } => Ok("error reply, session still usable".into()),
            other => Err(format!("after an unknown request, predict answered with {}", other.to_value()["type"])),
        })
    })();
    record(&mut checks, "unknown-request", unknown);

    let caps = info.capabilities;
    let x = inputs[0].clone();
    let mask_seq = vec![info.mask_token.clone(); x.len()];
    for (claimed, name, request) in [
        (
            caps.grad_dot,
            "grad_dot",
            Request::GradDot { id: 0, tokens: x.clone(), baseline: mask_seq.clone(), alpha: 0.5, target: 0 },
        ),
        (caps.attention, "attention", Request::Attention { id: 0, tokens: x.clone() }),
    ] {
        if claimed {
            continue;
        }
        let gating = (|| -> Outcome {
            let reply = one(&mut client, request.to_value())?;
            Ok(match reply.get("code").and_then(Value::as_str) {
                Some(CODE_UNSUPPORTED) => Ok(format!("{name} refused as unsupported")),
                _ => Err(format!("unclaimed {name} answered with {reply}")),
            })
        })();
        record(&mut checks, &format!("gating-{name}"), gating);
    }

    if caps.attention {
        let attention = (|| -> Outcome {
            let requests = inputs.iter().map(|t| Request::Attention { id: 0, tokens: t.clone() }.to_value()).collect();
            let replies = client.raw(requests)?;
            let again = one(&mut client, Request::Attention { id: 0, tokens: inputs[0].clone() }.to_value())?;
            if again.get("heads") != replies[0].get("heads") {
                return Ok(Err("repeated attention replies differ".into()));
            }
            for (t, reply) in inputs.iter().zip(replies) {
                let (heads, alignment) = match Reply::from_value(reply)? {
                    Reply::Attention { heads, alignment, .. } => (heads, alignment),
                    other => return Ok(Err(format!("attention answered with {}", other.to_value()["type"]))),
                };
                if heads.is_empty() {
                    return Ok(Err("no attention heads".into()));
                }
                let map = AttentionMap { heads, alignment: decode_alignment(&alignment)? };
                if let Err(e) = map.validate() {
                    return Ok(Err(e.to_string()));
                }
                for i in 0..t.len() {
                    let hits = map.alignment.iter().filter(|a| **a == Some(i)).count();
                    if hits != 1 {
                        return Ok(Err(format!("token {i} aligned to {hits} positions")));
                    }
                }
                if map.alignment.iter().flatten().any(|&i| i >= t.len()) {
                    return Ok(Err("alignment points past the input".into()));
                }
            }
            Ok(Ok(format!("{} attention maps row-stochastic and aligned", inputs.len())))
        })();
        record(&mut checks, "attention", attention);
    }

    if caps.grad_dot {
        let grads = (|| -> Outcome {
            let mut worst: f64 = 0.0;
            for t in inputs.iter().step_by(2).take(GRAD_PROBES) {
                match path_integral_gap(&mut client, t, &info)? {
                    Ok(gap) => worst = worst.max(gap),
                    Err(msg) => return Ok(Err(msg)),
                }
            }
            Ok(if worst <= GRAD_DOT_TOLERANCE {
                Ok(format!("path integral matches log-odds within {worst:.2e}"))
            } else {
                Err(format!("path integral misses log-odds by {worst:.2e} (tolerance {GRAD_DOT_TOLERANCE:e})"))
            })
        })();
        record(&mut checks, "grad-dot", grads);
    }

    ConformanceReport { endpoint, hello: Some(info), checks }
}

/// Integrate `grad_dot` of two class logits along the straight path from the
/// all-mask baseline and compare with the change in their log-odds, which is
/// observable through probabilities alone. Returns the relative gap.
fn path_integral_gap(client: &mut Client, tokens: &[String], info: &HelloInfo) -> Result<std::result::Result<f64, String>> {
    let baseline = vec![info.mask_token.clone(); tokens.len()];
    let rows = batch_rows(one(
        client,
        Request::PredictBatch { id: 0, batch: vec![tokens.to_vec(), baseline.clone()] }.to_value(),
    )?)?;
    if rows.len() != 2 || rows.iter().any(|r| simplex_violation(r, info.classes).is_some()) {
        return Ok(Err("unusable probabilities for the path check".into()));
    }
    let target = crate::model::argmax(&rows[0]);
    let other = (target + 1) % info.classes;
    let log_odds = |p: &[f64]| p[target].ln() - p[other].ln();
    let expected = log_odds(&rows[0]) - log_odds(&rows[1]);

    let mut requests = Vec::with_capacity(2 * GRAD_STEPS);
    for j in 0..GRAD_STEPS {
        let alpha = (j as f64 + 0.5) / GRAD_STEPS as f64;
        for class in [target, other] {
            requests.push(
                Request::GradDot { id: 0, tokens: tokens.to_vec(), baseline: baseline.clone(), alpha, target: class }
                    .to_value(),
            );
        }
    }
    let mut integral = 0.0;
    for (j, reply) in client.raw(requests)?.into_iter().enumerate() {
        let values = match Reply::from_value(reply)? {
            Reply::GradDot { values, .. } if values.len() == tokens.len() && values.iter().all(|v| v.is_finite()) => values,
            Reply::GradDot { .. } => return Ok(Err("grad_dot values have the wrong length or are non-finite".into())),
            other => return Ok(Err(format!("grad_dot answered with {}", other.to_value()["type"]))),
        };
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        integral += sign * values.iter().sum::<f64>() / GRAD_STEPS as f64;
    }
    Ok(Ok((integral - expected).abs() / expected.abs().max(1.0)))
}
