//! Simulatability: how much explanations help an agent model imitate the
//! original model's predictions.
//!
//! The agent is a bag-of-words linear classifier, the same family as the
//! built-in linear model, trained by mini-batch gradient descent on the
//! original model's labels. One agent sees raw inputs; every other agent sees
//! the same inputs with a method's top explanations inserted, at training and
//! at test time.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faithfulness::{match_budget, plan_budgets};
use crate::model::{softmax, LinearBowModel, LinearBowParams, Model};
use crate::seed;
use crate::types::{Explanations, Instance, Kind, Unit};

pub const OPEN: &str = "<";
pub const CLOSE: &str = ">";
pub const SEPARATOR: &str = "||";
pub const ITEM_SEP: &str = ";";
pub const MEMBER_SEP: &str = ",";

/// Rank mark after a wrapped region: `#1` to `#9`, then `#9+`.
pub fn rank_mark(rank: usize) -> String {
    if rank <= 9 {
        format!("#{rank}")
    } else {
        "#9+".to_string()
    }
}

fn regions(unit: &Unit) -> Vec<(usize, usize)> {
    match *unit {
        Unit::Token(i) => vec![(i, i)],
        Unit::TokenPair(p, q) => vec![(p, p), (q, q)],
        Unit::SpanPair(a, b) => vec![a, b],
    }
}

/// Wrap each unit's tokens as `<` tokens `>` `#r`, `r` the 1-based rank.
/// Tokens already wrapped by a higher-ranked unit are left alone; the rest of
/// a region is wrapped as its remaining contiguous runs.
pub fn insert_symbol(instance: &Instance, units: &[Unit]) -> Vec<String> {
    let len = instance.len();
    let mut region_of: Vec<Option<usize>> = vec![None; len];
    let mut region_rank = Vec::new();
    for (r, unit) in units.iter().enumerate() {
        for (start, end) in regions(unit) {
            let mut open = false;
            for slot in region_of.iter_mut().take(end.min(len.saturating_sub(1)) + 1).skip(start) {
                if slot.is_some() {
                    open = false;
                    continue;
                }
                if !open {
                    region_rank.push(r + 1);
                    open = true;
                }
                *slot = Some(region_rank.len() - 1);
            }
        }
    }
    let mut out = Vec::with_capacity(len + 4 * region_rank.len());
    for (i, tok) in instance.tokens().enumerate() {
        let here = region_of[i];
        if here.is_some() && (i == 0 || region_of[i - 1] != here) {
            out.push(OPEN.to_string());
        }
        out.push(tok.clone());
        if let Some(reg) = here {
            if i + 1 == len || region_of[i + 1] != here {
                out.push(CLOSE.to_string());
                out.push(rank_mark(region_rank[reg]));
            }
        }
    }
    out
}

/// Append `||` and the explanations in rank order: tokens separated by `;`,
/// the members of an interaction by `,`, spans as their tokens.
pub fn insert_text(instance: &Instance, units: &[Unit]) -> Vec<String> {
    let mut out = instance.sequence();
    if units.is_empty() {
        return out;
    }
    out.push(SEPARATOR.to_string());
    let tok = |i: usize| instance.token(i).unwrap_or_default().to_string();
    for (r, unit) in units.iter().enumerate() {
        if r > 0 {
            out.push(ITEM_SEP.to_string());
        }
        for (m, (start, end)) in regions(unit).into_iter().enumerate() {
            if m > 0 {
                out.push(MEMBER_SEP.to_string());
            }
            out.extend((start..=end).map(tok));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Insertion {
    None,
    #[default]
    Symbol,
    Text,
}

impl Insertion {
    pub fn as_str(self) -> &'static str {
        match self {
            Insertion::None => "none",
            Insertion::Symbol => "symbol",
            Insertion::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Option<Insertion> {
        match s {
            "none" => Some(Insertion::None),
            "symbol" => Some(Insertion::Symbol),
            "text" => Some(Insertion::Text),
            _ => None,
        }
    }

    pub fn apply(self, instance: &Instance, units: &[Unit]) -> Vec<String> {
        match self {
            Insertion::None => instance.sequence(),
            Insertion::Symbol => insert_symbol(instance, units),
            Insertion::Text => insert_text(instance, units),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Instances with the original model's labels and a fixed split.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDataset {
    pub instances: Vec<Instance>,
    /// The original model's prediction for each instance.
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub classes: usize,
}

impl SimulationDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Label every instance with the model's prediction and split by a seeded
/// shuffle into `round(r0 N)`, `round(r1 N)` and the remainder.
pub fn build_simulation_splits(
    dataset: &[Instance],
    model: &dyn Model,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SimulationDataset> {
    let n = dataset.len();
    let total = ratios.0 + ratios.1 + ratios.2;
    let train = (ratios.0 / total * n as f64).round() as usize;
    let dev = (ratios.1 / total * n as f64).round() as usize;
    if train == 0 || dev == 0 || train + dev >= n {
        return Err(Error::validation(
            "dataset",
            format!("{n} instances cannot fill train/dev/test splits with ratios {ratios:?}"),
        ));
    }
    let batch: Vec<Vec<String>> = dataset.iter().map(|x| x.sequence()).collect();
    let labels = model.predict_batch(&batch)?.into_iter().map(|p| p.label).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "simulation-split", n as u64));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    Ok(SimulationDataset { instances: dataset.to_vec(), labels, splits, classes: model.classes() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentHyper {
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
}

impl Default for AgentHyper {
    fn default() -> Self {
        AgentHyper { lr: 0.5, l2: 1e-4, epochs: 60, batch: 16, patience: 8 }
    }
}

/// Macro-F1 over the classes occurring in either labels or predictions.
pub fn macro_f1(gold: &[usize], pred: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = gold.iter().chain(pred).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let f1: f64 = classes
        .iter()
        .map(|&c| {
            let tp = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count() as f64;
            let fp = gold.iter().zip(pred).filter(|(g, p)| **g != c && **p == c).count() as f64;
            let fneg = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p != c).count() as f64;
            2.0 * tp / (2.0 * tp + fp + fneg)
        })
        .sum();
    f1 / classes.len() as f64
}

/// Token-count features over a fixed vocabulary; unknown tokens are dropped.
fn featurize(vocab: &BTreeMap<String, usize>, tokens: &[String]) -> Vec<(usize, f64)> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        if let Some(&v) = vocab.get(t) {
            *counts.entry(v).or_insert(0.0) += 1.0;
        }
    }
    counts.into_iter().collect()
}

fn scores(w: &[Vec<f64>], b: &[f64], x: &[(usize, f64)]) -> Vec<f64> {
    let mut z = b.to_vec();
    for &(v, c) in x {
        for (zc, wc) in z.iter_mut().zip(&w[v]) {
            *zc += c * wc;
        }
    }
    z
}

fn predict_label(w: &[Vec<f64>], b: &[f64], x: &[(usize, f64)]) -> usize {
    crate::model::argmax(&scores(w, b, x))
}

/// Train a linear agent on `inputs[i]` for every training index and return
/// it as a linear model. Dev macro-F1 selects the epoch.
pub fn train_agent(
    sim: &SimulationDataset,
    inputs: &[Vec<String>],
    hyper: &AgentHyper,
    mask_token: &str,
    seed: u64,
) -> Result<LinearBowModel> {
    if inputs.len() != sim.instances.len() {
        return Err(Error::Contract("one input per simulation instance".into()));
    }
    let train = sim.indices(Split::Train);
    let dev = sim.indices(Split::Dev);
    let words: BTreeSet<&String> =
        train.iter().flat_map(|&i| inputs[i].iter()).filter(|t| *t != mask_token).collect();
    let vocab: BTreeMap<String, usize> = words.into_iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    let feats: Vec<Vec<(usize, f64)>> = inputs.iter().map(|t| featurize(&vocab, t)).collect();
    let c = sim.classes;
    let mut w = vec![vec![0.0; c]; vocab.len()];
    let mut b = vec![0.0; c];
    let dev_gold: Vec<usize> = dev.iter().map(|&i| sim.labels[i]).collect();
    let dev_f1 = |w: &[Vec<f64>], b: &[f64]| {
        let pred: Vec<usize> = dev.iter().map(|&i| predict_label(w, b, &feats[i])).collect();
        macro_f1(&dev_gold, &pred)
    };
    let mut best = (dev_f1(&w, &b), w.clone(), b.clone());
    let mut stale = 0;
    let mut order = train.clone();
    let batch = hyper.batch.max(1);
    let diverged = || Error::Training { lr: hyper.lr, l2: hyper.l2, epochs: hyper.epochs, batch };
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut seed::rng(seed, "agent-epoch", epoch as u64));
        for chunk in order.chunks(batch) {
            let mut gw: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut gb = vec![0.0; c];
            for &i in chunk {
                let mut p = softmax(&scores(&w, &b, &feats[i]));
                p[sim.labels[i]] -= 1.0;
                for (g, d) in gb.iter_mut().zip(&p) {
                    *g += d;
                }
                for &(v, cnt) in &feats[i] {
                    let row = gw.entry(v).or_insert_with(|| vec![0.0; c]);
                    for (g, d) in row.iter_mut().zip(&p) {
                        *g += cnt * d;
                    }
                }
            }
            let scale = hyper.lr / chunk.len() as f64;
            // weight decay on every row, data gradient on the touched ones
            let decay = 1.0 - hyper.lr * hyper.l2;
            for (v, row) in w.iter_mut().enumerate() {
                for (k, wk) in row.iter_mut().enumerate() {
                    *wk = *wk * decay - gw.get(&v).map_or(0.0, |g| scale * g[k]);
                }
            }
            for (bk, g) in b.iter_mut().zip(&gb) {
                *bk -= scale * g;
            }
            if b.iter().any(|x| !x.is_finite()) || w.iter().flatten().any(|x| !x.is_finite()) {
                return Err(diverged());
            }
        }
        let f1 = dev_f1(&w, &b);
        if f1 > best.0 {
            best = (f1, w.clone(), b.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    let (_, w, b) = best;
    LinearBowModel::new(LinearBowParams {
        id: "agent".into(),
        classes: c,
        mask_token: mask_token.to_string(),
        vocab: vocab.into_keys().collect(),
        weights: w,
        bias: b,
        oov: None,
    })
}

/// Macro-F1 of `agent` against the original labels on the test split.
pub fn simulate_score(sim: &SimulationDataset, inputs: &[Vec<String>], agent: &LinearBowModel) -> f64 {
    let test = sim.indices(Split::Test);
    let gold: Vec<usize> = test.iter().map(|&i| sim.labels[i]).collect();
    let pred: Vec<usize> = test.iter().map(|&i| crate::model::argmax(&agent.raw_logits(&inputs[i]))).collect();
    macro_f1(&gold, &pred)
}

#[derive(Debug, Clone, Copy)]
pub struct SimulatabilityOptions {
    pub insertion: Insertion,
    /// Span step whose budget sets how many explanations are inserted.
    pub k: usize,
    pub hyper: AgentHyper,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SimulatabilityOptions {
    fn default() -> Self {
        SimulatabilityOptions {
            insertion: Insertion::Symbol,
            k: 1,
            hyper: AgentHyper::default(),
            ratios: (0.6, 0.2, 0.2),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSimulatability {
    pub method: String,
    pub kind: Kind,
    pub sf: f64,
    pub rsf: f64,
    /// Instances with no budget from the span method; they get no insertion.
    pub without_budget: usize,
    #[serde(skip)]
    pub agent: LinearBowParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatabilityReport {
    pub insertion: Insertion,
    pub k: usize,
    pub seed: u64,
    pub sf_o: f64,
    pub methods: Vec<MethodSimulatability>,
    pub sizes: (usize, usize, usize),
    /// The agent trained without explanations.
    #[serde(skip)]
    pub baseline_agent: LinearBowParams,
}

impl SimulatabilityReport {
    pub fn method(&self, method: &str, kind: Kind) -> Option<&MethodSimulatability> {
        self.methods.iter().find(|m| m.method == method && m.kind == kind)
    }
}

/// Agent inputs with the budget-matched explanations of `method` inserted.
pub fn explained_inputs(
    sim: &SimulationDataset,
    method: &Explanations,
    spans: &Explanations,
    insertion: Insertion,
    k: usize,
) -> Result<(Vec<Vec<String>>, usize)> {
    let plan = plan_budgets(&sim.instances, spans, k)?;
    let mut theta = vec![None; sim.instances.len()];
    for (idx, b) in &plan.budgets {
        theta[*idx] = Some(b[k - 1]);
    }
    let mut missing = 0;
    let inputs = sim
        .instances
        .iter()
        .zip(&theta)
        .map(|(x, t)| {
            let units = match (t, method.get(&x.id)) {
                (Some(t), Some(attr)) => match_budget(attr, *t, k).units,
                _ => {
                    missing += 1;
                    Vec::new()
                }
            };
            insertion.apply(x, &units)
        })
        .collect();
    Ok((inputs, missing))
}

/// SF of an agent per method and RSF against the agent trained without
/// explanations. All agents share splits, hyperparameters and seed.
pub fn unified_simulatability(
    model: &dyn Model,
    dataset: &[Instance],
    methods: &[Explanations],
    spans: &Explanations,
    opts: &SimulatabilityOptions,
) -> Result<SimulatabilityReport> {
    if opts.k == 0 {
        return Err(Error::Contract("span step k starts at 1".into()));
    }
    let sim = build_simulation_splits(dataset, model, opts.ratios, opts.seed)?;
    let mask = model.mask_token();
    let raw: Vec<Vec<String>> = sim.instances.iter().map(|x| x.sequence()).collect();
    let base = train_agent(&sim, &raw, &opts.hyper, mask, opts.seed)?;
    let sf_o = simulate_score(&sim, &raw, &base);

    let variants: Vec<Result<MethodSimulatability>> = crate::par::map(methods, |m| {
        let (inputs, missing) = explained_inputs(&sim, m, spans, opts.insertion, opts.k)?;
        let agent = train_agent(&sim, &inputs, &opts.hyper, mask, opts.seed)?;
        let sf = simulate_score(&sim, &inputs, &agent);
        Ok(MethodSimulatability {
            method: m.method.clone(),
            kind: m.kind,
            sf,
            rsf: sf - sf_o,
            without_budget: missing,
            agent: agent.params().clone(),
        })
    });
    let sizes = (sim.indices(Split::Train).len(), sim.indices(Split::Dev).len(), sim.indices(Split::Test).len());
    Ok(SimulatabilityReport {
        insertion: opts.insertion,
        k: opts.k,
        seed: opts.seed,
        sf_o,
        methods: variants.into_iter().collect::<Result<_>>()?,
        sizes,
        baseline_agent: base.params().clone(),
    })
}
