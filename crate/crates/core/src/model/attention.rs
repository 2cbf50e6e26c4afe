//! A single multi-head self-attention block over token embeddings with a
//! prepended start token. The classifier reads the start position's
//! attention output, so every head's row 0 is the "attention to the first
//! token" signal used by attention-based attributions.

use std::collections::HashMap;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_input, softmax, AttentionMap, Capabilities, Model, Prediction};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `dim x key_dim`
    pub query: Vec<Vec<f64>>,
    /// `dim x key_dim`
    pub key: Vec<Vec<f64>>,
    /// `dim x value_dim`
    pub value: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAttentionParams {
    pub id: String,
    pub classes: usize,
    pub dim: usize,
    pub mask_token: String,
    pub vocab: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub start: Vec<f64>,
    pub mask: Vec<f64>,
    pub oov: Vec<f64>,
    pub heads: Vec<HeadParams>,
    /// `(heads * value_dim) x classes`
    pub classifier: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ToyAttentionParams {
    /// Uniform(-1, 1) initialisation of every parameter from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        id: &str,
        vocab: Vec<String>,
        dim: usize,
        heads: usize,
        head_dim: usize,
        classes: usize,
        mask_token: &str,
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(seed, "toy-attention", 0);
        let mut mat = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let embeddings = mat(vocab.len(), dim);
        let start = mat(1, dim).remove(0);
        let mask = mat(1, dim).remove(0);
        let oov = mat(1, dim).remove(0);
        let head_params = (0..heads)
            .map(|_| HeadParams {
                query: mat(dim, head_dim),
                key: mat(dim, head_dim),
                value: mat(dim, head_dim),
            })
            .collect();
        let classifier = mat(heads * head_dim, classes);
        let bias = mat(1, classes).remove(0);
        ToyAttentionParams {
            id: id.to_string(),
            classes,
            dim,
            mask_token: mask_token.to_string(),
            vocab,
            embeddings,
            start,
            mask,
            oov,
            heads: head_params,
            classifier,
            bias,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyAttentionModel {
    params: ToyAttentionParams,
    index: HashMap<String, usize>,
    key_dim: usize,
    value_dim: usize,
}

struct HeadPass {
    query0: Vec<f64>,
    values: Vec<Vec<f64>>,
    attn0: Vec<f64>,
    out: Vec<f64>,
}

fn project(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w.first().map_or(0, Vec::len);
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(w) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ToyAttentionModel {
    pub fn new(params: ToyAttentionParams) -> Result<Self> {
        let bad = |msg: String| Error::validation(&params.id, msg);
        let d = params.dim;
        if params.classes < 2 {
            return Err(bad("need at least two classes".into()));
        }
        if params.mask_token.is_empty() {
            return Err(bad("mask token must be non-empty".into()));
        }
        if params.heads.is_empty() {
            return Err(bad("need at least one head".into()));
        }
        if params.vocab.len() != params.embeddings.len()
            || params.embeddings.iter().any(|e| e.len() != d)
            || [&params.start, &params.mask, &params.oov].iter().any(|e| e.len() != d)
        {
            return Err(bad(format!("embeddings must all have dimension {d}")));
        }
        let key_dim = params.heads[0].key.first().map_or(0, Vec::len);
        let value_dim = params.heads[0].value.first().map_or(0, Vec::len);
        if key_dim == 0 || value_dim == 0 {
            return Err(bad("empty projection".into()));
        }
        for h in &params.heads {
            let ok = |w: &Vec<Vec<f64>>, cols: usize| w.len() == d && w.iter().all(|r| r.len() == cols);
            if !ok(&h.query, key_dim) || !ok(&h.key, key_dim) || !ok(&h.value, value_dim) {
                return Err(bad("inconsistent head projection shapes".into()));
            }
        }
        if params.classifier.len() != params.heads.len() * value_dim
            || params.classifier.iter().any(|r| r.len() != params.classes)
            || params.bias.len() != params.classes
        {
            return Err(bad("classifier shape does not match heads x value_dim x classes".into()));
        }
        let index = params.vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(ToyAttentionModel { params, index, key_dim, value_dim })
    }

    pub fn params(&self) -> &ToyAttentionParams {
        &self.params
    }

    pub fn num_heads(&self) -> usize {
        self.params.heads.len()
    }

    pub fn embedding(&self, token: &str) -> &[f64] {
        if token == self.params.mask_token {
            return &self.params.mask;
        }
        match self.index.get(token) {
            Some(&i) => &self.params.embeddings[i],
            None => &self.params.oov,
        }
    }

    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        std::iter::once(self.params.start.clone())
            .chain(tokens.iter().map(|t| self.embedding(t).to_vec()))
            .collect()
    }

    fn head_pass(&self, head: &HeadParams, x: &[Vec<f64>]) -> HeadPass {
        let scale = (self.key_dim as f64).sqrt();
        let query0 = project(&x[0], &head.query);
        let scores: Vec<f64> =
            x.iter().map(|xj| dot(&query0, &project(xj, &head.key)) / scale).collect();
        let attn0 = softmax(&scores);
        let values: Vec<Vec<f64>> = x.iter().map(|xj| project(xj, &head.value)).collect();
        let mut out = vec![0.0; self.value_dim];
        for (a, v) in attn0.iter().zip(&values) {
            for (o, vk) in out.iter_mut().zip(v) {
                *o += a * vk;
            }
        }
        HeadPass { query0, values, attn0, out }
    }

    fn logits_from(&self, x: &[Vec<f64>]) -> (Vec<f64>, Vec<HeadPass>) {
        let passes: Vec<HeadPass> = self.params.heads.iter().map(|h| self.head_pass(h, x)).collect();
        let mut logits = self.params.bias.clone();
        for (h, pass) in passes.iter().enumerate() {
            for (k, o) in pass.out.iter().enumerate() {
                let row = &self.params.classifier[h * self.value_dim + k];
                for (z, w) in logits.iter_mut().zip(row) {
                    *z += o * w;
                }
            }
        }
        (logits, passes)
    }

    pub fn raw_logits(&self, tokens: &[String]) -> Vec<f64> {
        self.logits_from(&self.embed(tokens)).0
    }

    fn path_embeddings(&self, tokens: &[String], baseline: &[String], alphas: &[f64]) -> Vec<Vec<f64>> {
        let mut x = vec![self.params.start.clone()];
        for ((t, b), a) in tokens.iter().zip(baseline).zip(alphas) {
            let (et, eb) = (self.embedding(t), self.embedding(b));
            x.push(eb.iter().zip(et).map(|(bv, tv)| bv + a * (tv - bv)).collect());
        }
        x
    }

    /// Target logit with position `j` embedded at `baseline_j + alphas[j] *
    /// (tokens_j - baseline_j)`. Exposed for finite-difference checks.
    pub fn target_logit_on_path(
        &self,
        tokens: &[String],
        baseline: &[String],
        alphas: &[f64],
        target: usize,
    ) -> f64 {
        self.logits_from(&self.path_embeddings(tokens, baseline, alphas)).0[target]
    }
}

impl Model for ToyAttentionModel {
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
        Capabilities { grad_dot: true, attention: true }
    }

    fn logits(&self, tokens: &[String]) -> Result<Vec<f64>> {
        check_input(self, tokens)?;
        Ok(self.raw_logits(tokens))
    }

    fn predict(&self, tokens: &[String]) -> Result<Prediction> {
        check_input(self, tokens)?;
        Ok(Prediction::from_logits(&self.raw_logits(tokens)))
    }

    fn grad_dot(
        &self,
        tokens: &[String],
        baseline: &[String],
        alpha: f64,
        target: usize,
    ) -> Result<Vec<f64>> {
        check_input(self, tokens)?;
        if tokens.len() != baseline.len() {
            return Err(Error::Contract("input and baseline lengths differ".into()));
        }
        if target >= self.params.classes {
            return Err(Error::Contract(format!("target class {target} out of range")));
        }
        let alphas = vec![alpha; tokens.len()];
        let x = self.path_embeddings(tokens, baseline, &alphas);
        let (_, passes) = self.logits_from(&x);
        let scale = (self.key_dim as f64).sqrt();
        let d = self.params.dim;
        let mut grads = vec![vec![0.0; d]; tokens.len()];

        for (h, (head, pass)) in self.params.heads.iter().zip(&passes).enumerate() {
            // classifier column for the target, restricted to this head's outputs
            let g: Vec<f64> = (0..self.value_dim)
                .map(|k| self.params.classifier[h * self.value_dim + k][target])
                .collect();
            let g_out = dot(&g, &pass.out);
            // only row 0 feeds the classifier; its query comes from the fixed start token
            let wv_g: Vec<f64> = head.value.iter().map(|row| dot(row, &g)).collect();
            let wk_q: Vec<f64> = head.key.iter().map(|row| dot(row, &pass.query0) / scale).collect();
            for j in 1..x.len() {
                let a = pass.attn0[j];
                let delta = a * (dot(&g, &pass.values[j]) - g_out);
                for k in 0..d {
                    grads[j - 1][k] += wv_g[k] * a + wk_q[k] * delta;
                }
            }
        }

        Ok(tokens
            .iter()
            .zip(baseline)
            .zip(&grads)
            .map(|((t, b), grad)| {
                let (et, eb) = (self.embedding(t), self.embedding(b));
                grad.iter().zip(et.iter().zip(eb)).map(|(gk, (tv, bv))| gk * (tv - bv)).sum()
            })
            .collect())
    }

    fn attention(&self, tokens: &[String]) -> Result<AttentionMap> {
        check_input(self, tokens)?;
        let x = self.embed(tokens);
        let scale = (self.key_dim as f64).sqrt();
        let heads = self
            .params
            .heads
            .iter()
            .map(|head| {
                let keys: Vec<Vec<f64>> = x.iter().map(|xj| project(xj, &head.key)).collect();
                x.iter()
                    .map(|xi| {
                        let q = project(xi, &head.query);
                        softmax(&keys.iter().map(|k| dot(&q, k) / scale).collect::<Vec<_>>())
                    })
                    .collect()
            })
            .collect();
        let alignment = std::iter::once(None).chain((0..tokens.len()).map(Some)).collect();
        Ok(AttentionMap { heads, alignment })
    }
}
