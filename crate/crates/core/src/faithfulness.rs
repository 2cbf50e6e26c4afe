//! Comprehensiveness and sufficiency under budgets matched across explanation
//! kinds.
//!
//! For span-step `k` the budget `theta_{x,k}` is the number of distinct
//! tokens covered by the top-`k` span pairs of a designated span method. Every
//! other method contributes the shortest prefix of its ranking that reaches
//! that many tokens, so token, pair and span explanations are compared at the
//! same perturbation size.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{mask_keep, mask_omit, Model};
use crate::par;
use crate::seed;
use crate::types::{tokens_of, AttributionSet, Explanations, Instance, Kind, Unit};

/// Default number of span steps.
pub const DEFAULT_K: usize = 3;

/// `|tokens_of(top-k spans)|`; saturates at the whole set when `k` exceeds it.
pub fn budget_from_spans(spans: &AttributionSet, k: usize) -> Result<usize> {
    if spans.kind != Kind::SpanIntEx {
        return Err(Error::Contract(format!("budgets come from span pairs, got {}", spans.kind)));
    }
    if k == 0 {
        return Err(Error::Contract("span step k starts at 1".into()));
    }
    if spans.is_empty() {
        return Err(Error::Degenerate(format!("instance {} has no span pairs", spans.instance_id)));
    }
    Ok(tokens_of(spans.top(k).iter().map(|e| &e.unit)).len())
}

/// Budgets for `k = 1..=k_max`.
pub fn token_budgets(spans: &AttributionSet, k_max: usize) -> Result<Vec<usize>> {
    (1..=k_max).map(|k| budget_from_spans(spans, k)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub units: Vec<Unit>,
    pub tokens: BTreeSet<usize>,
    /// The ranking ran out before reaching the budget.
    pub saturated: bool,
    /// Tokens selected beyond the budget.
    pub overshoot: usize,
}

/// Units of `attr` matched to token budget `theta` at span step `k`: the
/// shortest prefix covering at least `theta` tokens, or exactly the top `k`
/// for span pairs.
pub fn match_budget(attr: &AttributionSet, theta: usize, k: usize) -> Selection {
    let units: Vec<Unit> = if attr.kind == Kind::SpanIntEx {
        attr.top(k).iter().map(|e| e.unit).collect()
    } else {
        let mut units = Vec::new();
        let mut covered = BTreeSet::new();
        for e in &attr.entries {
            if covered.len() >= theta {
                break;
            }
            covered.extend(e.unit.tokens());
            units.push(e.unit);
        }
        units
    };
    let tokens = tokens_of(&units);
    let saturated = if attr.kind == Kind::SpanIntEx { k > attr.len() } else { tokens.len() < theta };
    let overshoot = if attr.kind == Kind::SpanIntEx { 0 } else { tokens.len().saturating_sub(theta) };
    Selection { units, tokens, saturated, overshoot }
}

/// Whether omitting `tokens` changes the prediction away from `label`.
pub fn comp_point(model: &dyn Model, instance: &Instance, tokens: &BTreeSet<usize>, label: usize) -> Result<bool> {
    Ok(model.predict(&mask_omit(instance, tokens, model.mask_token())?)?.label != label)
}

/// Whether keeping only `tokens` preserves the prediction `label`.
pub fn suff_point(model: &dyn Model, instance: &Instance, tokens: &BTreeSet<usize>, label: usize) -> Result<bool> {
    Ok(model.predict(&mask_keep(instance, tokens, model.mask_token())?)?.label == label)
}

/// A random ranking of the tokens of instance `index`, shared by every
/// comparison that uses the same master seed.
pub fn random_ranking(len: usize, master: u64, index: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::rng(master, "random-baseline", index as u64));
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

/// Per-instance budgets from the designated span method.
#[derive(Debug, Clone)]
pub struct BudgetPlan {
    pub k_max: usize,
    /// `(dataset index, budgets for k = 1..=k_max)` of every usable instance.
    pub budgets: Vec<(usize, Vec<usize>)>,
    pub skipped: Vec<Skipped>,
    /// `round(mean theta_k)` over usable instances, the random baseline sizes.
    pub random_sizes: Vec<usize>,
}

pub fn plan_budgets(dataset: &[Instance], spans: &Explanations, k_max: usize) -> Result<BudgetPlan> {
    if k_max == 0 {
        return Err(Error::Contract("span step k starts at 1".into()));
    }
    if spans.kind != Kind::SpanIntEx {
        return Err(Error::Contract(format!("budget source must be a span method, got {}", spans.label())));
    }
    let mut budgets = Vec::new();
    let mut skipped = Vec::new();
    for (idx, x) in dataset.iter().enumerate() {
        let outcome = match spans.get(&x.id) {
            None => Err(Error::Degenerate(format!("no {} explanation for {}", spans.label(), x.id))),
            Some(set) => token_budgets(set, k_max),
        };
        match outcome {
            Ok(b) => budgets.push((idx, b)),
            Err(e) => skipped.push(Skipped { id: x.id.clone(), reason: e.to_string() }),
        }
    }
    let random_sizes = (0..k_max)
        .map(|k| {
            if budgets.is_empty() {
                return 0;
            }
            let mean = budgets.iter().map(|(_, b)| b[k] as f64).sum::<f64>() / budgets.len() as f64;
            mean.round() as usize
        })
        .collect();
    Ok(BudgetPlan { k_max, budgets, skipped, random_sizes })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FaithScore {
    pub comp: f64,
    /// Mean of the sufficiency points: higher means more sufficient.
    pub suff: f64,
}

impl FaithScore {
    /// `1 - suff`, for plots where lower is better.
    pub fn suff_lower_better(&self) -> f64 {
        1.0 - self.suff
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodFaithfulness {
    pub method: String,
    pub kind: Kind,
    pub score: FaithScore,
    /// Score at each span step.
    pub per_k: Vec<FaithScore>,
    /// Selections that ran out of units before the budget.
    pub saturated: usize,
    /// Selections that covered more tokens than the budget.
    pub overshoot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaithfulnessReport {
    pub k_max: usize,
    pub seed: u64,
    pub budget_method: String,
    pub n_instances: usize,
    pub skipped: Vec<Skipped>,
    pub methods: Vec<MethodFaithfulness>,
    pub random: FaithScore,
    pub random_per_k: Vec<FaithScore>,
    pub random_sizes: Vec<usize>,
}

impl FaithfulnessReport {
    pub fn method(&self, method: &str, kind: Kind) -> Option<&MethodFaithfulness> {
        self.methods.iter().find(|m| m.method == method && m.kind == kind)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FaithfulnessOptions {
    pub k_max: usize,
    pub seed: u64,
}

impl Default for FaithfulnessOptions {
    fn default() -> Self {
        FaithfulnessOptions { k_max: DEFAULT_K, seed: 0 }
    }
}

/// Points of one instance: `[method][k] = (cp, sp)`; the random baseline is
/// the last method row.
struct InstancePoints {
    points: Vec<Vec<(bool, bool)>>,
    saturated: Vec<usize>,
    overshoot: Vec<usize>,
}

fn evaluate_instance(
    model: &dyn Model,
    x: &Instance,
    idx: usize,
    budgets: &[usize],
    methods: &[Explanations],
    plan: &BudgetPlan,
    seed: u64,
) -> Result<InstancePoints> {
    let mut selections: Vec<Vec<BTreeSet<usize>>> = Vec::with_capacity(methods.len() + 1);
    let mut saturated = vec![0; methods.len()];
    let mut overshoot = vec![0; methods.len()];
    for (mi, method) in methods.iter().enumerate() {
        let set = method
            .get(&x.id)
            .ok_or_else(|| Error::validation(&x.id, format!("no {} explanation", method.label())))?;
        let mut row = Vec::with_capacity(budgets.len());
        for (k0, &theta) in budgets.iter().enumerate() {
            let sel = match_budget(set, theta, k0 + 1);
            saturated[mi] += sel.saturated as usize;
            overshoot[mi] += (sel.overshoot > 0) as usize;
            row.push(sel.tokens);
        }
        selections.push(row);
    }
    let ranking = random_ranking(x.len(), seed, idx);
    selections.push(
        plan.random_sizes.iter().map(|&s| ranking[..s.min(x.len())].iter().copied().collect()).collect(),
    );

    let mask = model.mask_token();
    let mut batch = vec![x.sequence()];
    for row in &selections {
        for tokens in row {
            batch.push(mask_omit(x, tokens, mask)?);
            batch.push(mask_keep(x, tokens, mask)?);
        }
    }
    let preds = model.predict_batch(&batch)?;
    if preds.len() != batch.len() {
        return Err(Error::protocol("predictions", format!("expected {}, got {}", batch.len(), preds.len())));
    }
    let label = preds[0].label;
    let mut it = preds[1..].chunks(2);
    let points = selections
        .iter()
        .map(|row| {
            row.iter()
                .map(|_| {
                    let pair = it.next().unwrap();
                    (pair[0].label != label, pair[1].label == label)
                })
                .collect()
        })
        .collect();
    Ok(InstancePoints { points, saturated, overshoot })
}

/// Unified comprehensiveness and sufficiency of every method, plus the shared
/// random baseline, with budgets taken from `spans`.
pub fn unified_faithfulness(
    model: &dyn Model,
    dataset: &[Instance],
    methods: &[Explanations],
    spans: &Explanations,
    opts: &FaithfulnessOptions,
) -> Result<FaithfulnessReport> {
    let plan = plan_budgets(dataset, spans, opts.k_max)?;
    let run = |item: &(usize, Vec<usize>)| {
        let (idx, budgets) = item;
        evaluate_instance(model, &dataset[*idx], *idx, budgets, methods, &plan, opts.seed)
    };
    let results: Vec<Result<InstancePoints>> =
        if model.thread_safe() { par::map(&plan.budgets, run) } else { plan.budgets.iter().map(run).collect() };

    let mut skipped = plan.skipped.clone();
    let mut kept = Vec::new();
    for ((idx, _), r) in plan.budgets.iter().zip(results) {
        match r {
            Ok(p) => kept.push(p),
            Err(e @ Error::Validation { .. }) => return Err(e),
            Err(e) => skipped.push(Skipped { id: dataset[*idx].id.clone(), reason: e.to_string() }),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = kept.len() as f64;
    let k_max = opts.k_max;
    let summarize = |row: usize| -> (FaithScore, Vec<FaithScore>) {
        let per_k: Vec<FaithScore> = (0..k_max)
            .map(|k| {
                let (c, s) = kept.iter().fold((0usize, 0usize), |(c, s), p| {
                    let (cp, sp) = p.points[row][k];
                    (c + cp as usize, s + sp as usize)
                });
                FaithScore { comp: c as f64 / n, suff: s as f64 / n }
            })
            .collect();
        let total = FaithScore {
            comp: per_k.iter().map(|f| f.comp).sum::<f64>() / k_max as f64,
            suff: per_k.iter().map(|f| f.suff).sum::<f64>() / k_max as f64,
        };
        (total, per_k)
    };
    let methods_out = methods
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let (score, per_k) = summarize(mi);
            MethodFaithfulness {
                method: m.method.clone(),
                kind: m.kind,
                score,
                per_k,
                saturated: kept.iter().map(|p| p.saturated[mi]).sum(),
                overshoot: kept.iter().map(|p| p.overshoot[mi]).sum(),
            }
        })
        .collect();
    let (random, random_per_k) = summarize(methods.len());
    Ok(FaithfulnessReport {
        k_max,
        seed: opts.seed,
        budget_method: spans.label(),
        n_instances: kept.len(),
        skipped,
        methods: methods_out,
        random,
        random_per_k,
        random_sizes: plan.random_sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantModel, LinearBowModel, LinearBowParams};
    use crate::types::{Entry, RankOrder};
    use proptest::prelude::*;

    fn set(kind: Kind, units: &[Unit]) -> AttributionSet {
        let n = units.len() as f64;
        let entries = units.iter().enumerate().map(|(i, &u)| Entry::new(u, n - i as f64)).collect();
        AttributionSet::new("x", kind, "m", entries, RankOrder::Signed).unwrap()
    }

    #[test]
    fn budget_examples() {
        let spans = set(Kind::SpanIntEx, &[Unit::SpanPair((0, 1), (4, 6)), Unit::SpanPair((1, 2), (6, 6))]);
        assert_eq!(budget_from_spans(&spans, 1).unwrap(), 5);
        // union {0,1,2,4,5,6}
        assert_eq!(budget_from_spans(&spans, 2).unwrap(), 6);
        assert_eq!(budget_from_spans(&spans, 5).unwrap(), 6);
        let empty = AttributionSet::new("x", Kind::SpanIntEx, "m", vec![], RankOrder::Signed).unwrap();
        assert!(matches!(budget_from_spans(&empty, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn match_budget_examples() {
        let tokens = set(Kind::TokenEx, &(0..8).map(Unit::Token).collect::<Vec<_>>());
        let sel = match_budget(&tokens, 5, 1);
        assert_eq!(sel.units, (0..5).map(Unit::Token).collect::<Vec<_>>());
        assert!(!sel.saturated && sel.overshoot == 0);

        let pairs = set(Kind::TokenIntEx, &[Unit::TokenPair(0, 5), Unit::TokenPair(1, 5), Unit::TokenPair(2, 6)]);
        let sel = match_budget(&pairs, 3, 1);
        assert_eq!(sel.units.len(), 2);
        assert_eq!(sel.tokens, BTreeSet::from([0, 1, 5]));

        let pairs = set(Kind::TokenIntEx, &[Unit::TokenPair(0, 5), Unit::TokenPair(1, 6)]);
        let sel = match_budget(&pairs, 3, 1);
        assert_eq!(sel.tokens.len(), 4);
        assert_eq!(sel.overshoot, 1);

        let sel = match_budget(&pairs, 9, 1);
        assert!(sel.saturated);
        assert_eq!(sel.units.len(), 2);
    }

    #[test]
    fn span_selection_is_top_k() {
        let spans = set(Kind::SpanIntEx, &[Unit::SpanPair((0, 1), (4, 6)), Unit::SpanPair((2, 2), (5, 5))]);
        assert_eq!(match_budget(&spans, 1, 1).units.len(), 1);
        assert!(match_budget(&spans, 1, 3).saturated);
    }

    fn lin() -> LinearBowModel {
        // "good" pushes class 1; every other word is neutral
        LinearBowModel::new(LinearBowParams {
            id: "lin".into(),
            classes: 2,
            mask_token: "[MASK]".into(),
            vocab: vec!["good".into()],
            weights: vec![vec![0.0, 2.0]],
            bias: vec![0.5, 0.0],
            oov: None,
        })
        .unwrap()
    }

    #[test]
    fn points_on_linear_model() {
        let m = lin();
        let x = Instance::from_strs("x", &["a", "good"], &["b"], 1).unwrap();
        // logits (0.5, 2.0) -> class 1; without "good": (0.5, 0) -> class 0
        assert!(comp_point(&m, &x, &BTreeSet::from([1]), 1).unwrap());
        assert!(!comp_point(&m, &x, &BTreeSet::from([0]), 1).unwrap());
        assert!(!comp_point(&m, &x, &BTreeSet::new(), 1).unwrap());
        assert!(suff_point(&m, &x, &BTreeSet::from([1]), 1).unwrap());
        assert!(suff_point(&m, &x, &BTreeSet::from([0, 1, 2]), 1).unwrap());
        assert!(!suff_point(&m, &x, &BTreeSet::from([0]), 1).unwrap());
    }

    fn dataset(n: usize) -> Vec<Instance> {
        (0..n)
            .map(|i| Instance::from_strs(&format!("x{i}"), &["a", "good", "c"], &["b", "d"], 1).unwrap())
            .collect()
    }

    fn explanations(kind: Kind, data: &[Instance], units: &[Unit]) -> Explanations {
        let sets = data
            .iter()
            .map(|x| {
                let mut s = set(kind, units);
                s.instance_id = x.id.clone();
                s
            })
            .collect();
        Explanations::new("m", kind, sets).unwrap()
    }

    #[test]
    fn constant_model_scores() {
        let data = dataset(5);
        let spans = explanations(Kind::SpanIntEx, &data, &[Unit::SpanPair((0, 1), (3, 3))]);
        let toks = explanations(Kind::TokenEx, &data, &(0..5).map(Unit::Token).collect::<Vec<_>>());
        let m = ConstantModel::new(vec![0.3, 0.7], "[MASK]").unwrap();
        let r = unified_faithfulness(&m, &data, &[toks, spans.clone()], &spans, &FaithfulnessOptions::default())
            .unwrap();
        for mf in &r.methods {
            assert_eq!(mf.score, FaithScore { comp: 0.0, suff: 1.0 });
        }
        assert_eq!(r.random, FaithScore { comp: 0.0, suff: 1.0 });
        assert_eq!(r.n_instances, 5);
    }

    #[test]
    fn single_instance_k1_is_the_point() {
        let data = dataset(1);
        let spans = explanations(Kind::SpanIntEx, &data, &[Unit::SpanPair((1, 1), (3, 3))]);
        let r = unified_faithfulness(&lin(), &data, &[spans.clone()], &spans, &FaithfulnessOptions { k_max: 1, seed: 0 })
            .unwrap();
        // omitting {1, 3} removes "good": flips; keeping {1, 3} keeps class 1
        assert_eq!(r.methods[0].score, FaithScore { comp: 1.0, suff: 1.0 });
    }

    #[test]
    fn instances_without_spans_are_skipped() {
        let data = dataset(3);
        let mut spans = explanations(Kind::SpanIntEx, &data, &[Unit::SpanPair((1, 1), (3, 3))]);
        spans.sets.get_mut("x1").unwrap().entries.clear();
        spans.sets.remove("x2");
        let r = unified_faithfulness(&lin(), &data, &[spans.clone()], &spans, &FaithfulnessOptions::default())
            .unwrap();
        assert_eq!(r.n_instances, 1);
        assert_eq!(r.skipped.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["x1", "x2"]);
    }

    #[test]
    fn random_baseline_is_seeded() {
        let data = dataset(20);
        let spans = explanations(Kind::SpanIntEx, &data, &[Unit::SpanPair((1, 1), (3, 3))]);
        let opts = FaithfulnessOptions { k_max: 1, seed: 11 };
        let a = unified_faithfulness(&lin(), &data, &[], &spans, &opts).unwrap();
        let b = unified_faithfulness(&lin(), &data, &[spans.clone()], &spans, &opts).unwrap();
        assert_eq!(a.random, b.random);
        assert_eq!(a.random_sizes, vec![2]);
    }

    proptest! {
        #[test]
        fn budget_matching_holds(scores in proptest::collection::vec(-1.0f64..1.0, 12), theta in 1usize..8) {
            // 3 + 4 tokens: all 12 cross pairs
            let mut entries = Vec::new();
            let mut it = scores.iter();
            for p in 0..3 {
                for q in 3..7 {
                    entries.push(Entry::new(Unit::TokenPair(p, q), *it.next().unwrap()));
                }
            }
            let pairs = AttributionSet::new("x", Kind::TokenIntEx, "m", entries, RankOrder::Signed).unwrap();
            let sel = match_budget(&pairs, theta, 1);
            if !sel.saturated {
                prop_assert!(sel.tokens.len() == theta || sel.tokens.len() == theta + 1);
            }
            let toks = AttributionSet::new(
                "x", Kind::TokenEx, "m",
                scores[..7].iter().enumerate().map(|(i, &s)| Entry::new(Unit::Token(i), s)).collect(),
                RankOrder::Signed,
            ).unwrap();
            prop_assert_eq!(match_budget(&toks, theta, 1).tokens.len(), theta.min(7));
        }

        #[test]
        fn budgets_non_decreasing(lens in proptest::collection::vec((0usize..3, 0usize..3, 0usize..2, 0usize..2), 1..5)) {
            let units: BTreeSet<Unit> = lens.iter().map(|&(s, l1, t, l2)| Unit::SpanPair((s, s + l1), (5 + t, 5 + t + l2))).collect();
            let entries = units.iter().enumerate().map(|(i, &u)| Entry::new(u, -(i as f64))).collect();
            let spans = AttributionSet::new("x", Kind::SpanIntEx, "m", entries, RankOrder::Signed).unwrap();
            let b = token_budgets(&spans, 6).unwrap();
            prop_assert!(b.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(*b.last().unwrap() <= 9);
        }
    }
}
