//! The classifier contract every attribution and perturbation test runs
//! against, the masking machinery, and the built-in toy models.

mod attention;
mod constant;
mod linear;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Instance;

pub use attention::{HeadParams, ToyAttentionModel, ToyAttentionParams};
pub use constant::ConstantModel;
pub use linear::{LinearBowModel, LinearBowParams};

/// Tolerance on the probability simplex.
pub const PROB_TOLERANCE: f64 = 1e-6;
/// Tolerance on attention row sums.
pub const ATTENTION_TOLERANCE: f64 = 1e-5;

/// Optional model capabilities. `predict` is always available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub grad_dot: bool,
    pub attention: bool,
}

impl Capabilities {
    pub fn names(&self) -> Vec<&'static str> {
        let mut out = vec!["predict"];
        if self.grad_dot {
            out.push("grad_dot");
        }
        if self.attention {
            out.push("attention");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    /// Validate a probability vector and take its argmax (lowest index on ties).
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::protocol("probs", "need at least two classes"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::protocol("probs", "negative or non-finite probability"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::protocol("probs", format!("probabilities sum to {sum}")));
        }
        let label = argmax(&probs);
        Ok(Prediction { probs, label })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let probs = softmax(logits);
        let label = argmax(&probs);
        Prediction { probs, label }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-head attention matrices over the model's internal positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `heads[h][from][to]`, each row a distribution.
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Internal position to global token index; `None` for positions that are
    /// not input tokens (the anchor).
    pub alignment: Vec<Option<usize>>,
}

impl AttentionMap {
    pub fn validate(&self) -> Result<()> {
        let size = self.alignment.len();
        for (h, head) in self.heads.iter().enumerate() {
            if head.len() != size {
                return Err(Error::protocol("heads", format!("head {h} has {} rows, expected {size}", head.len())));
            }
            for (r, row) in head.iter().enumerate() {
                if row.len() != size {
                    return Err(Error::protocol("heads", format!("head {h} row {r} is not square")));
                }
                if row.iter().any(|a| !a.is_finite() || *a < 0.0) {
                    return Err(Error::protocol("heads", format!("head {h} row {r} has a negative weight")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ATTENTION_TOLERANCE {
                    return Err(Error::protocol("heads", format!("head {h} row {r} sums to {sum}")));
                }
            }
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Internal position holding global token `index`.
    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.alignment.iter().position(|a| *a == Some(index))
    }

    /// The anchor position: the first position, which attention-based token
    /// scores read from.
    pub fn anchor(&self) -> usize {
        0
    }
}

/// A classifier the engine can query.
pub trait Model: Send + Sync {
    fn id(&self) -> &str;

    fn classes(&self) -> usize;

    fn mask_token(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// Whether concurrent calls are safe without external serialization.
    fn thread_safe(&self) -> bool {
        true
    }

    /// Longest accepted input, if bounded.
    fn max_len(&self) -> Option<usize> {
        None
    }

    fn predict(&self, tokens: &[String]) -> Result<Prediction>;

    fn predict_batch(&self, batch: &[Vec<String>]) -> Result<Vec<Prediction>> {
        batch.iter().map(|t| self.predict(t)).collect()
    }

    /// Gradient of the `target` logit at the point `baseline + alpha * (tokens
    /// - baseline)` in embedding space, dotted with `tokens - baseline` per
    /// token position.
    fn grad_dot(
        &self,
        _tokens: &[String],
        _baseline: &[String],
        _alpha: f64,
        _target: usize,
    ) -> Result<Vec<f64>> {
        Err(Error::UnsupportedCapability("grad_dot"))
    }

    fn attention(&self, _tokens: &[String]) -> Result<AttentionMap> {
        Err(Error::UnsupportedCapability("attention"))
    }

    /// Raw class logits, when the model exposes them. Used to report the
    /// completeness gap of path attributions.
    fn logits(&self, _tokens: &[String]) -> Result<Vec<f64>> {
        Err(Error::UnsupportedCapability("logits"))
    }
}

pub type ModelHandle = Arc<dyn Model>;

pub(crate) fn check_input(model: &dyn Model, tokens: &[String]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if let Some(limit) = model.max_len() {
        if tokens.len() > limit {
            return Err(Error::Capacity { len: tokens.len(), limit });
        }
    }
    Ok(())
}

fn check_indices(instance: &Instance, set: &BTreeSet<usize>) -> Result<()> {
    match set.iter().next_back() {
        Some(&max) if max >= instance.len() => Err(Error::validation(
            &instance.id,
            format!("token index {max} outside [0, {})", instance.len()),
        )),
        _ => Ok(()),
    }
}

/// The instance's token sequence with every position in `omit` replaced by `mask`.
pub fn mask_omit(instance: &Instance, omit: &BTreeSet<usize>, mask: &str) -> Result<Vec<String>> {
    check_indices(instance, omit)?;
    Ok(instance
        .tokens()
        .enumerate()
        .map(|(i, t)| if omit.contains(&i) { mask.to_string() } else { t.clone() })
        .collect())
}

/// The instance's token sequence with every position outside `keep` masked.
pub fn mask_keep(instance: &Instance, keep: &BTreeSet<usize>, mask: &str) -> Result<Vec<String>> {
    check_indices(instance, keep)?;
    Ok(instance
        .tokens()
        .enumerate()
        .map(|(i, t)| if keep.contains(&i) { t.clone() } else { mask.to_string() })
        .collect())
}

/// Keep-mask from a boolean membership vector; used on hot coalition paths.
pub(crate) fn mask_keep_flags(tokens: &[String], keep: &[bool], mask: &str) -> Vec<String> {
    tokens
        .iter()
        .zip(keep)
        .map(|(t, &k)| if k { t.clone() } else { mask.to_string() })
        .collect()
}
