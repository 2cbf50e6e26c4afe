//! Agreement with human annotations as mean average precision, at token level
//! and at interaction level.
//!
//! Thresholds sit at the same budget points as the faithfulness metrics: for
//! span step `k` the prediction set is the matched-budget selection of the
//! method, so every kind is scored at the same number of nested thresholds.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::faithfulness::{match_budget, plan_budgets, random_ranking};
use crate::seed;
use crate::types::{AttributionSet, Entry, Explanations, GoldAnnotation, Instance, Kind, RankOrder, Unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    /// Identical index tuples.
    #[default]
    Exact,
    /// Both sides of a predicted pair intersect the matching sides of a gold pair.
    Overlap,
}

impl Matcher {
    pub fn as_str(self) -> &'static str {
        match self {
            Matcher::Exact => "exact",
            Matcher::Overlap => "overlap",
        }
    }

    pub fn parse(s: &str) -> Option<Matcher> {
        match s {
            "exact" => Some(Matcher::Exact),
            "overlap" => Some(Matcher::Overlap),
            _ => None,
        }
    }

    pub fn matches(self, predicted: &Unit, gold: &Unit) -> bool {
        match self {
            Matcher::Exact => predicted == gold,
            Matcher::Overlap => match (sides(predicted), sides(gold)) {
                (Some((a, b)), Some((c, d))) => intersects(a, c) && intersects(b, d),
                _ => predicted == gold,
            },
        }
    }
}

fn sides(u: &Unit) -> Option<((usize, usize), (usize, usize))> {
    match *u {
        Unit::Token(_) => None,
        Unit::TokenPair(p, q) => Some(((p, p), (q, q))),
        Unit::SpanPair(a, b) => Some((a, b)),
    }
}

fn intersects(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Token,
    Interaction,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Token => "token",
            Level::Interaction => "interaction",
        }
    }
}

/// Fraction of predicted units matching some gold unit, and fraction of gold
/// units matched by some prediction. An empty prediction scores `(0, 0)`.
pub fn precision_recall(predicted: &[Unit], gold: &BTreeSet<Unit>, matcher: Matcher) -> Result<(f64, f64)> {
    if gold.is_empty() {
        return Err(Error::Contract("precision and recall need a non-empty gold set".into()));
    }
    if predicted.is_empty() {
        return Ok((0.0, 0.0));
    }
    let hit = predicted.iter().filter(|p| gold.iter().any(|g| matcher.matches(p, g))).count();
    let found = gold.iter().filter(|g| predicted.iter().any(|p| matcher.matches(p, g))).count();
    Ok((hit as f64 / predicted.len() as f64, found as f64 / gold.len() as f64))
}

/// `sum_i (R_i - R_{i-1}) P_i` over nested prediction sets, `R_{-1} = 0`.
pub fn average_precision_nested(sets: &[Vec<Unit>], gold: &BTreeSet<Unit>, matcher: Matcher) -> Result<f64> {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for set in sets {
        let (p, r) = precision_recall(set, gold, matcher)?;
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(ap)
}

/// The nested prediction sets of `attr` at token budgets `budgets` (one per
/// span step), as tokens or as the units themselves.
pub fn thresholded_sets(attr: &AttributionSet, budgets: &[usize], level: Level) -> Result<Vec<Vec<Unit>>> {
    if level == Level::Interaction && attr.kind == Kind::TokenEx {
        return Err(Error::Contract("token explanations have no interaction-level agreement".into()));
    }
    Ok(budgets
        .iter()
        .enumerate()
        .map(|(k0, &theta)| {
            let sel = match_budget(attr, theta, k0 + 1);
            match level {
                Level::Token => sel.tokens.iter().map(|&i| Unit::Token(i)).collect(),
                Level::Interaction => sel.units,
            }
        })
        .collect())
}

pub fn average_precision(
    attr: &AttributionSet,
    gold: &BTreeSet<Unit>,
    budgets: &[usize],
    level: Level,
    matcher: Matcher,
) -> Result<f64> {
    average_precision_nested(&thresholded_sets(attr, budgets, level)?, gold, matcher)
}

/// Gold units a method of `kind` is compared against at `level`.
pub fn gold_for(gold: &GoldAnnotation, kind: Kind, level: Level) -> BTreeSet<Unit> {
    match level {
        Level::Token => gold.gold_tokens().into_iter().map(Unit::Token).collect(),
        Level::Interaction if kind == Kind::SpanIntEx => gold.gold_spans(),
        Level::Interaction => gold.gold_pairs(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AgreementOptions {
    pub k_max: usize,
    pub seed: u64,
    pub matcher: Matcher,
}

impl Default for AgreementOptions {
    fn default() -> Self {
        AgreementOptions { k_max: crate::faithfulness::DEFAULT_K, seed: 0, matcher: Matcher::Exact }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMap {
    pub method: String,
    pub kind: Kind,
    pub map: f64,
    pub n_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub level: Level,
    pub matcher: Matcher,
    pub k_max: usize,
    pub seed: u64,
    pub methods: Vec<MethodMap>,
    pub random: f64,
    pub random_n: usize,
}

impl AgreementReport {
    pub fn method(&self, method: &str, kind: Kind) -> Option<&MethodMap> {
        self.methods.iter().find(|m| m.method == method && m.kind == kind)
    }
}

/// Random cross-pair ranking for instance `index`, as an attribution set.
fn random_pairs(x: &Instance, master: u64, index: usize) -> Result<AttributionSet> {
    let mut pairs: Vec<Unit> =
        (0..x.m()).flat_map(|p| (x.m()..x.len()).map(move |q| Unit::TokenPair(p, q))).collect();
    pairs.shuffle(&mut seed::rng(master, "random-pairs", index as u64));
    let n = pairs.len() as f64;
    let entries = pairs.into_iter().enumerate().map(|(r, u)| Entry::new(u, n - r as f64)).collect();
    AttributionSet::new(&x.id, Kind::TokenIntEx, "random", entries, RankOrder::Signed)
}

/// MAP of every method at `level`, plus a random baseline of matched size.
/// Token level compares covered tokens against token gold; interaction level
/// compares pairs or span pairs against the gold of the same kind.
pub fn unified_agreement(
    examples: &[Example],
    methods: &[Explanations],
    spans: &Explanations,
    level: Level,
    opts: &AgreementOptions,
) -> Result<AgreementReport> {
    if level == Level::Interaction {
        if let Some(m) = methods.iter().find(|m| m.kind == Kind::TokenEx) {
            return Err(Error::Contract(format!("{} has no interaction-level agreement", m.label())));
        }
    }
    let instances: Vec<Instance> = examples.iter().map(|e| e.instance.clone()).collect();
    let plan = plan_budgets(&instances, spans, opts.k_max)?;
    let empty = GoldAnnotation::default();

    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let mut total = 0.0;
        let mut count = 0;
        for (idx, budgets) in &plan.budgets {
            let ex = &examples[*idx];
            let gold = gold_for(ex.gold.as_ref().unwrap_or(&empty), method.kind, level);
            if gold.is_empty() {
                continue;
            }
            let attr = method
                .get(&ex.instance.id)
                .ok_or_else(|| Error::validation(&ex.instance.id, format!("no {} explanation", method.label())))?;
            total += average_precision(attr, &gold, budgets, level, opts.matcher)?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyEvaluation);
        }
        out.push(MethodMap { method: method.method.clone(), kind: method.kind, map: total / count as f64, n_instances: count });
    }

    let mut total = 0.0;
    let mut count = 0;
    for (idx, _) in &plan.budgets {
        let ex = &examples[*idx];
        let x = &ex.instance;
        let gold_ann = ex.gold.as_ref().unwrap_or(&empty);
        let (sets, gold) = match level {
            Level::Token => {
                let ranking = random_ranking(x.len(), opts.seed, *idx);
                let sets: Vec<Vec<Unit>> = plan
                    .random_sizes
                    .iter()
                    .map(|&s| {
                        let mut prefix = ranking[..s.min(x.len())].to_vec();
                        prefix.sort_unstable();
                        prefix.into_iter().map(Unit::Token).collect()
                    })
                    .collect();
                (sets, gold_for(gold_ann, Kind::TokenEx, level))
            }
            Level::Interaction => {
                let attr = random_pairs(x, opts.seed, *idx)?;
                (thresholded_sets(&attr, &plan.random_sizes, level)?, gold_for(gold_ann, Kind::TokenIntEx, level))
            }
        };
        if gold.is_empty() {
            continue;
        }
        total += average_precision_nested(&sets, &gold, opts.matcher)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(AgreementReport {
        level,
        matcher: opts.matcher,
        k_max: opts.k_max,
        seed: opts.seed,
        methods: out,
        random: total / count as f64,
        random_n: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranked(kind: Kind, id: &str, units: &[Unit]) -> AttributionSet {
        let n = units.len() as f64;
        let entries = units.iter().enumerate().map(|(i, &u)| Entry::new(u, n - i as f64)).collect();
        AttributionSet::new(id, kind, "m", entries, RankOrder::Signed).unwrap()
    }

    fn toks(ids: &[usize]) -> BTreeSet<Unit> {
        ids.iter().map(|&i| Unit::Token(i)).collect()
    }

    #[test]
    fn precision_recall_examples() {
        let g = toks(&[0, 1]);
        assert_eq!(precision_recall(&[Unit::Token(0), Unit::Token(1)], &g, Matcher::Exact).unwrap(), (1.0, 1.0));
        assert_eq!(precision_recall(&[], &g, Matcher::Exact).unwrap(), (0.0, 0.0));
        assert_eq!(precision_recall(&[Unit::Token(0), Unit::Token(7)], &g, Matcher::Exact).unwrap(), (0.5, 0.5));
        assert!(precision_recall(&[Unit::Token(0)], &BTreeSet::new(), Matcher::Exact).is_err());
    }

    #[test]
    fn ap_hand_cases() {
        // gold {a, b}, ranking [a, x, b], one threshold per rank
        let attr = ranked(Kind::TokenEx, "x", &[Unit::Token(0), Unit::Token(5), Unit::Token(1)]);
        let ap = average_precision(&attr, &toks(&[0, 1]), &[1, 2, 3], Level::Token, Matcher::Exact).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);

        let perfect = ranked(Kind::TokenEx, "x", &[Unit::Token(0), Unit::Token(1)]);
        assert_eq!(average_precision(&perfect, &toks(&[0, 1]), &[2], Level::Token, Matcher::Exact).unwrap(), 1.0);

        let disjoint = ranked(Kind::TokenEx, "x", &[Unit::Token(3), Unit::Token(4)]);
        assert_eq!(average_precision(&disjoint, &toks(&[0, 1]), &[1, 2], Level::Token, Matcher::Exact).unwrap(), 0.0);
    }

    #[test]
    fn pair_ranking_hand_case() {
        let g1 = Unit::TokenPair(0, 3);
        let junk = Unit::TokenPair(1, 4);
        let g2 = Unit::TokenPair(2, 5);
        let attr = ranked(Kind::TokenIntEx, "x", &[g1, junk, g2]);
        let gold = BTreeSet::from([g1, g2]);
        let ap = average_precision(&attr, &gold, &[2, 4, 6], Level::Interaction, Matcher::Exact).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_matcher() {
        let gold = Unit::SpanPair((0, 2), (5, 6));
        assert!(Matcher::Overlap.matches(&Unit::SpanPair((2, 3), (6, 8)), &gold));
        assert!(!Matcher::Overlap.matches(&Unit::SpanPair((3, 3), (6, 8)), &gold));
        assert!(!Matcher::Exact.matches(&Unit::SpanPair((2, 3), (6, 8)), &gold));
        assert!(Matcher::Overlap.matches(&Unit::TokenPair(1, 5), &gold));
    }

    #[test]
    fn token_set_at_interaction_level_is_rejected() {
        let attr = ranked(Kind::TokenEx, "x", &[Unit::Token(0)]);
        assert!(matches!(
            average_precision(&attr, &toks(&[0]), &[1], Level::Interaction, Matcher::Exact),
            Err(Error::Contract(_))
        ));
    }

    fn example(id: &str, gold: Option<GoldAnnotation>) -> Example {
        Example { instance: Instance::from_strs(id, &["a", "b", "c"], &["d", "e"], 0).unwrap(), gold }
    }

    fn token_gold(id: &str, t: &[usize]) -> Option<GoldAnnotation> {
        Some(GoldAnnotation { instance_id: id.into(), token_gold: Some(t.iter().copied().collect()), ..Default::default() })
    }

    #[test]
    fn map_excludes_empty_gold_and_reports_perfect_methods() {
        let examples = vec![example("x0", token_gold("x0", &[0, 3])), example("x1", None)];
        let spans = Explanations::new(
            "s",
            Kind::SpanIntEx,
            examples.iter().map(|e| ranked(Kind::SpanIntEx, &e.instance.id, &[Unit::SpanPair((0, 0), (3, 3))])).collect(),
        )
        .unwrap();
        let tok = Explanations::new(
            "t",
            Kind::TokenEx,
            examples.iter().map(|e| ranked(Kind::TokenEx, &e.instance.id, &[Unit::Token(3), Unit::Token(0), Unit::Token(1)])).collect(),
        )
        .unwrap();
        let r = unified_agreement(&examples, &[tok, spans.clone()], &spans, Level::Token, &AgreementOptions::default())
            .unwrap();
        assert_eq!(r.methods[0].map, 1.0);
        assert_eq!(r.methods[0].n_instances, 1);
        assert_eq!(r.methods[1].map, 1.0);
        assert_eq!(r.random_n, 1);

        let none = vec![example("x1", None)];
        let spans1 = Explanations::new("s", Kind::SpanIntEx, vec![ranked(Kind::SpanIntEx, "x1", &[Unit::SpanPair((0, 0), (3, 3))])]).unwrap();
        assert!(matches!(
            unified_agreement(&none, &[spans1.clone()], &spans1, Level::Token, &AgreementOptions::default()),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn interaction_level_span_gold() {
        let span = Unit::SpanPair((0, 1), (3, 4));
        let gold = GoldAnnotation { instance_id: "x0".into(), span_gold: Some(BTreeSet::from([span])), ..Default::default() };
        let examples = vec![example("x0", Some(gold))];
        let spans = Explanations::new("s", Kind::SpanIntEx, vec![ranked(Kind::SpanIntEx, "x0", &[span])]).unwrap();
        let r = unified_agreement(&examples, &[spans.clone()], &spans, Level::Interaction, &AgreementOptions::default())
            .unwrap();
        assert_eq!(r.methods[0].map, 1.0);
        let toks = Explanations::new("t", Kind::TokenEx, vec![ranked(Kind::TokenEx, "x0", &[Unit::Token(0)])]).unwrap();
        assert!(matches!(
            unified_agreement(&examples, &[toks], &spans, Level::Interaction, &AgreementOptions::default()),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn ap_bounded_and_recall_monotone(order in Just((0usize..8).collect::<Vec<_>>()).prop_shuffle(), gold in proptest::collection::btree_set(0usize..8, 1..5)) {
            let units: Vec<Unit> = order.iter().map(|&i| Unit::Token(i)).collect();
            let attr = ranked(Kind::TokenEx, "x", &units);
            let gold: BTreeSet<Unit> = gold.into_iter().map(Unit::Token).collect();
            let budgets: Vec<usize> = (1..=8).collect();
            let sets = thresholded_sets(&attr, &budgets, Level::Token).unwrap();
            let mut prev = 0.0;
            for s in &sets {
                let (_, r) = precision_recall(s, &gold, Matcher::Exact).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            let ap = average_precision_nested(&sets, &gold, Matcher::Exact).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            let gold_first = units.iter().take(gold.len()).all(|u| gold.contains(u));
            if gold_first {
                prop_assert!((ap - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn flattening_pairs_matches_tokens(perm in Just((0usize..3).collect::<Vec<_>>()).prop_shuffle(), gold in proptest::collection::btree_set(0usize..6, 1..4)) {
            // pairs (p, p+3) cover tokens in the same order as the token ranking
            let pairs: Vec<Unit> = perm.iter().map(|&p| Unit::TokenPair(p, p + 3)).collect();
            let tokens: Vec<Unit> = perm.iter().flat_map(|&p| [Unit::Token(p), Unit::Token(p + 3)]).collect();
            let gold: BTreeSet<Unit> = gold.into_iter().map(Unit::Token).collect();
            let budgets = [2, 4, 6];
            let a = average_precision(&ranked(Kind::TokenIntEx, "x", &pairs), &gold, &budgets, Level::Token, Matcher::Exact).unwrap();
            let b = average_precision(&ranked(Kind::TokenEx, "x", &tokens), &gold, &budgets, Level::Token, Matcher::Exact).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
