use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_input, softmax, Capabilities, Model, Prediction};

/// Parameters of a bag-of-words linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBowParams {
    pub id: String,
    pub classes: usize,
    pub mask_token: String,
    pub vocab: Vec<String>,
    /// One row of `classes` weights per vocabulary entry.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Row used for out-of-vocabulary tokens; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oov: Option<Vec<f64>>,
}

/// `logit[c] = bias[c] + sum_i weights[token_i][c]`.
#[derive(Debug, Clone)]
pub struct LinearBowModel {
    params: LinearBowParams,
    index: HashMap<String, usize>,
    zero: Vec<f64>,
    oov: Vec<f64>,
}

impl LinearBowModel {
    pub fn new(params: LinearBowParams) -> Result<Self> {
        let bad = |msg: String| Error::validation(&params.id, msg);
        if params.classes < 2 {
            return Err(bad("need at least two classes".into()));
        }
        if params.mask_token.is_empty() {
            return Err(bad("mask token must be non-empty".into()));
        }
        if params.bias.len() != params.classes {
            return Err(bad(format!("bias has {} entries", params.bias.len())));
        }
        if params.vocab.len() != params.weights.len() {
            return Err(bad("every vocabulary entry needs a weight row".into()));
        }
        let mut index = HashMap::with_capacity(params.vocab.len());
        for (i, (tok, row)) in params.vocab.iter().zip(&params.weights).enumerate() {
            if row.len() != params.classes {
                return Err(bad(format!("weight row for {tok:?} has {} entries", row.len())));
            }
            if *tok == params.mask_token && row.iter().any(|w| *w != 0.0) {
                return Err(bad("the mask token must have a zero weight row".into()));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(bad(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        let zero = vec![0.0; params.classes];
        let oov = params.oov.clone().unwrap_or_else(|| zero.clone());
        if oov.len() != params.classes {
            return Err(bad("oov row has the wrong width".into()));
        }
        Ok(LinearBowModel { params, index, zero, oov })
    }

    pub fn params(&self) -> &LinearBowParams {
        &self.params
    }

    /// Weight row of a token (mask → zeros, unknown → oov row).
    pub fn row(&self, token: &str) -> &[f64] {
        if token == self.params.mask_token {
            return &self.zero;
        }
        match self.index.get(token) {
            Some(&i) => &self.params.weights[i],
            None => &self.oov,
        }
    }

    pub fn raw_logits(&self, tokens: &[String]) -> Vec<f64> {
        let mut z = self.params.bias.clone();
        for t in tokens {
            for (zc, w) in z.iter_mut().zip(self.row(t)) {
                *zc += w;
            }
        }
        z
    }
}

impl Model for LinearBowModel {
    fn id(&self) -> &str {
        &self.params.id
    }

    fn classes(&self) -> usize {
        self.params.classes
    }

    fn mask_token(&self) -> &str {
        &self.params.mask_token
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { grad_dot: true, attention: false }
    }

    fn logits(&self, tokens: &[String]) -> Result<Vec<f64>> {
        check_input(self, tokens)?;
        Ok(self.raw_logits(tokens))
    }

    fn predict(&self, tokens: &[String]) -> Result<Prediction> {
        check_input(self, tokens)?;
        let probs = softmax(&self.raw_logits(tokens));
        Ok(Prediction { label: super::argmax(&probs), probs })
    }

    /// The integrand is constant along the path: the target weight of each
    /// token minus the target weight of its baseline token.
    fn grad_dot(
        &self,
        tokens: &[String],
        baseline: &[String],
        _alpha: f64,
        target: usize,
    ) -> Result<Vec<f64>> {
        check_input(self, tokens)?;
        if tokens.len() != baseline.len() {
            return Err(Error::Contract("input and baseline lengths differ".into()));
        }
        if target >= self.params.classes {
            return Err(Error::Contract(format!("target class {target} out of range")));
        }
        Ok(tokens
            .iter()
            .zip(baseline)
            .map(|(t, b)| self.row(t)[target] - self.row(b)[target])
            .collect())
    }
}
