//! Seeded planted-rule task with known explanations.
//!
//! Each rule is a pair of phrases, one for each part. A positive instance
//! contains both phrases of one rule at random offsets; a negative contains a
//! single phrase of one rule (a near miss) or no rule tokens at all. The rest
//! of each part is filler drawn from a disjoint vocabulary. Two models are
//! emitted that encode the rule exactly: a linear bag-of-words model and a
//! two-head attention model whose heads detect the two phrase sides.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::{HeadParams, LinearBowParams, ToyAttentionParams};
use crate::seed;
use crate::types::{GoldAnnotation, Instance, Unit};

pub const MASK: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub instances: usize,
    /// Inclusive range of part1 lengths.
    pub part1_len: (usize, usize),
    pub part2_len: (usize, usize),
    pub rules: usize,
    /// Inclusive range of phrase lengths.
    pub phrase_len: (usize, usize),
    pub positive_rate: f64,
    /// Share of negatives that carry one phrase of a rule.
    pub near_miss_rate: f64,
    /// Probability that a label is flipped.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 120,
            instances: 500,
            part1_len: (4, 6),
            part2_len: (4, 6),
            rules: 2,
            phrase_len: (2, 3),
            positive_rate: 0.5,
            near_miss_rate: 0.5,
            noise: 0.05,
            seed: 20240611,
        }
    }
}

/// One planted rule: `part1` phrase and `part2` phrase, as vocabulary tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub part1: Vec<String>,
    pub part2: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModels {
    pub linear: LinearBowParams,
    pub attention: ToyAttentionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub examples: Vec<Example>,
    pub rules: Vec<Rule>,
    pub models: SynthModels,
    /// Whether each instance carries a planted rule, before label noise.
    pub planted: Vec<bool>,
}

impl SynthOutput {
    /// Write the dataset as JSONL and both models, with the rules, as one
    /// JSON file.
    pub fn save(&self, dataset: &Path, models: &Path) -> Result<()> {
        crate::dataset::save_dataset(dataset, &self.examples)?;
        let doc = serde_json::json!({
            "linear": self.models.linear,
            "attention": self.models.attention,
            "rules": self.rules,
        });
        std::fs::write(models, serde_json::to_string(&doc)? + "\n")?;
        Ok(())
    }
}

/// Attention logit scale of the phrase detectors.
const DETECTOR_SCALE: f64 = 10.0;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation("synth", msg));
        let (lo, hi) = self.phrase_len;
        if lo < 2 || lo > hi {
            return bad(format!("phrase lengths {lo}..={hi}: need 2 <= min <= max"));
        }
        if self.part1_len.0 < hi || self.part2_len.0 < hi {
            return bad(format!("parts must fit a phrase of {hi} tokens"));
        }
        if self.part1_len.0 > self.part1_len.1 || self.part2_len.0 > self.part2_len.1 {
            return bad("part length ranges are reversed".into());
        }
        if self.rules == 0 {
            return bad("need at least one rule".into());
        }
        let rule_tokens = 2 * hi * self.rules;
        if rule_tokens + 1 > self.vocab_size {
            return bad(format!("{} rules need more than {} vocabulary entries", self.rules, self.vocab_size));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5)", self.noise));
        }
        for (name, p) in [("positive_rate", self.positive_rate), ("near_miss_rate", self.near_miss_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.instances == 0 {
            return bad("need at least one instance".into());
        }
        Ok(())
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Linear model: every token of rule `r` adds `1/T_r` to the class-1 logit,
/// `T_r` the rule's token count. The bias sits midway between the strongest
/// near miss (one full phrase) and a positive missing one token, so a
/// positive only flips once two of its rule tokens are removed.
fn linear_model(rules: &[Rule], vocab: &[String]) -> Result<LinearBowParams> {
    let mut upper = f64::INFINITY; // bias must stay below -(near miss mass)
    let mut lower = f64::NEG_INFINITY; // and above -(positive minus one token)
    let mut weights = vec![vec![0.0, 0.0]; vocab.len()];
    for r in rules {
        let t = (r.part1.len() + r.part2.len()) as f64;
        let near = r.part1.len().max(r.part2.len()) as f64 / t;
        upper = upper.min(-near);
        lower = lower.max(-(t - 1.0) / t);
        for tok in r.part1.iter().chain(&r.part2) {
            let i: usize = tok[1..].parse().expect("vocabulary words are w<index>");
            weights[i][1] = 1.0 / t;
        }
    }
    if lower >= upper {
        return Err(Error::validation("synth", "phrase lengths leave no bias separating near misses"));
    }
    Ok(LinearBowParams {
        id: "synth-linear".into(),
        classes: 2,
        mask_token: MASK.into(),
        vocab: vocab.to_vec(),
        weights,
        bias: vec![0.0, 0.5 * (lower + upper)],
        oov: None,
    })
}

/// Attention model over 3-dim embeddings `(part1-phrase flag, part2-phrase
/// flag, 1)`. Head 0 attends from the start token to part1-phrase tokens and
/// reads their flag, head 1 does the same for part2 phrases; class 1 needs
/// both heads to fire.
fn attention_model(rules: &[Rule], vocab: &[String]) -> ToyAttentionParams {
    let side1: BTreeSet<&String> = rules.iter().flat_map(|r| &r.part1).collect();
    let side2: BTreeSet<&String> = rules.iter().flat_map(|r| &r.part2).collect();
    let embeddings = vocab
        .iter()
        .map(|w| vec![side1.contains(w) as u8 as f64, side2.contains(w) as u8 as f64, 1.0])
        .collect();
    let detector = |flag: usize| {
        let mut key = vec![vec![0.0]; 3];
        key[flag][0] = DETECTOR_SCALE;
        let mut value = vec![vec![0.0]; 3];
        value[flag][0] = 1.0;
        HeadParams { query: vec![vec![0.0], vec![0.0], vec![1.0]], key, value }
    };
    ToyAttentionParams {
        id: "synth-attention".into(),
        classes: 2,
        dim: 3,
        mask_token: MASK.into(),
        vocab: vocab.to_vec(),
        embeddings,
        start: vec![0.0, 0.0, 1.0],
        mask: vec![0.0, 0.0, 1.0],
        oov: vec![0.0, 0.0, 1.0],
        heads: vec![detector(0), detector(1)],
        classifier: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        bias: vec![0.0, -1.5],
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let vocab: Vec<String> = (0..spec.vocab_size).map(word).collect();
    let mut rng = seed::rng(spec.seed, "synth-rules", 0);
    let (lo, hi) = spec.phrase_len;
    let lens: Vec<(usize, usize)> =
        (0..spec.rules).map(|_| (rng.random_range(lo..=hi), rng.random_range(lo..=hi))).collect();
    let needed: usize = lens.iter().map(|(a, b)| a + b).sum();
    let picked = index::sample(&mut rng, spec.vocab_size, needed).into_vec();
    let mut it = picked.iter();
    let rules: Vec<Rule> = lens
        .iter()
        .map(|&(a, b)| Rule {
            part1: (0..a).map(|_| word(*it.next().unwrap())).collect(),
            part2: (0..b).map(|_| word(*it.next().unwrap())).collect(),
        })
        .collect();
    let rule_set: BTreeSet<usize> = picked.iter().copied().collect();
    let filler: Vec<usize> = (0..spec.vocab_size).filter(|i| !rule_set.contains(i)).collect();

    let mut examples = Vec::with_capacity(spec.instances);
    let mut planted = Vec::with_capacity(spec.instances);
    for i in 0..spec.instances {
        let mut rng = seed::rng(spec.seed, "synth-instance", i as u64);
        let m = rng.random_range(spec.part1_len.0..=spec.part1_len.1);
        let n = rng.random_range(spec.part2_len.0..=spec.part2_len.1);
        let mut part1: Vec<String> = (0..m).map(|_| word(filler[rng.random_range(0..filler.len())])).collect();
        let mut part2: Vec<String> = (0..n).map(|_| word(filler[rng.random_range(0..filler.len())])).collect();
        let positive = rng.random::<f64>() < spec.positive_rate;
        let r = &rules[rng.random_range(0..rules.len())];
        let place = |part: &mut Vec<String>, phrase: &[String], rng: &mut rand_chacha::ChaCha8Rng| {
            let at = rng.random_range(0..=part.len() - phrase.len());
            part[at..at + phrase.len()].clone_from_slice(phrase);
            at
        };
        let mut gold = None;
        if positive {
            let s = place(&mut part1, &r.part1, &mut rng);
            let t = m + place(&mut part2, &r.part2, &mut rng);
            let (se, te) = (s + r.part1.len() - 1, t + r.part2.len() - 1);
            let tokens: BTreeSet<usize> = (s..=se).chain(t..=te).collect();
            let pairs: BTreeSet<Unit> =
                (s..=se).flat_map(|p| (t..=te).map(move |q| Unit::TokenPair(p, q))).collect();
            gold = Some(GoldAnnotation {
                instance_id: format!("s{i:05}"),
                token_gold: Some(tokens),
                pair_gold: Some(pairs),
                span_gold: Some(BTreeSet::from([Unit::SpanPair((s, se), (t, te))])),
            });
        } else if rng.random::<f64>() < spec.near_miss_rate {
            if rng.random::<bool>() {
                place(&mut part1, &r.part1, &mut rng);
            } else {
                place(&mut part2, &r.part2, &mut rng);
            }
        }
        let flip = rng.random::<f64>() < spec.noise;
        let label = (positive != flip) as usize;
        let instance = Instance::new(format!("s{i:05}"), part1, part2, label)?;
        examples.push(Example { instance, gold });
        planted.push(positive);
    }
    let models = SynthModels { linear: linear_model(&rules, &vocab)?, attention: attention_model(&rules, &vocab) };
    Ok(SynthOutput { examples, rules, models, planted })
}
