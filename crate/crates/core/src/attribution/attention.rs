//! Attributions read directly off a model's attention maps.

use std::collections::BTreeSet;

use rand::seq::index;

use crate::attribution::{InteractionGraph, PairScores};
use crate::error::{Error, Result};
use crate::model::{mask_omit, AttentionMap, Model};
use crate::seed;
use crate::types::{AttributionSet, Entry, Instance, Kind, RankOrder, Unit};

/// Calibration instances used by [`select_head`] before subsampling.
pub const CALIBRATION_LIMIT: usize = 256;

fn attention_for(model: &dyn Model, instance: &Instance, head: usize) -> Result<AttentionMap> {
    if !model.capabilities().attention {
        return Err(Error::UnsupportedCapability("attention"));
    }
    let map = model.attention(&instance.sequence())?;
    map.validate()?;
    if head >= map.num_heads() {
        return Err(Error::validation(
            &instance.id,
            format!("head {head} out of range for {} heads", map.num_heads()),
        ));
    }
    Ok(map)
}

fn positions(map: &AttentionMap, instance: &Instance) -> Result<Vec<usize>> {
    (0..instance.len())
        .map(|i| {
            map.position_of(i)
                .ok_or_else(|| Error::protocol("alignment", format!("token {i} has no attention position")))
        })
        .collect()
}

/// Score of token `i`: the weight the anchor position puts on it in `head`.
pub fn attention_token(
    model: &dyn Model,
    instance: &Instance,
    head: usize,
    order: RankOrder,
) -> Result<AttributionSet> {
    let map = attention_for(model, instance, head)?;
    let pos = positions(&map, instance)?;
    let row = &map.heads[head][map.anchor()];
    let entries = pos.iter().enumerate().map(|(i, &p)| Entry::new(Unit::Token(i), row[p])).collect();
    AttributionSet::new(&instance.id, Kind::TokenEx, "attention", entries, order)
}

/// Cross-part pair scores `(att[p->q] + att[q->p]) / 2` in `head`, with the
/// directed weights as the interaction graph.
pub fn attention_interaction(
    model: &dyn Model,
    instance: &Instance,
    head: usize,
    order: RankOrder,
) -> Result<PairScores> {
    let map = attention_for(model, instance, head)?;
    let pos = positions(&map, instance)?;
    let att = &map.heads[head];
    let (m, n) = (instance.m(), instance.n());
    let mut graph = InteractionGraph::new(m, n);
    let mut entries = Vec::with_capacity(m * n);
    for p in 0..m {
        for q in m..m + n {
            let (fwd, back) = (att[pos[p]][pos[q]], att[pos[q]][pos[p]]);
            graph.add_edge(p, q, fwd);
            graph.add_edge(q, p, back);
            entries.push(Entry::new(Unit::TokenPair(p, q), 0.5 * (fwd + back)));
        }
    }
    let pairs = AttributionSet::new(&instance.id, Kind::TokenIntEx, "attention", entries, order)?;
    Ok(PairScores { pairs, graph })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSelection {
    pub head: usize,
    /// Comprehensiveness of every candidate head, in candidate order.
    pub scores: Vec<(usize, f64)>,
}

/// Pick the head whose anchor-attention token rankings are most
/// comprehensive: removing each instance's top `budget` tokens flips the
/// prediction most often. Ties go to the lowest head. With more than
/// [`CALIBRATION_LIMIT`] calibration instances a seeded subsample is used.
pub fn select_head(
    model: &dyn Model,
    calibration: &[Instance],
    candidates: &[usize],
    budget: usize,
    seed: u64,
) -> Result<HeadSelection> {
    if calibration.is_empty() {
        return Err(Error::Contract("head selection needs at least one calibration instance".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("no candidate heads".into()));
    }
    let chosen: Vec<&Instance> = if calibration.len() > CALIBRATION_LIMIT {
        let mut rng = seed::rng(seed, "select-head", calibration.len() as u64);
        let mut idx = index::sample(&mut rng, calibration.len(), CALIBRATION_LIMIT).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &calibration[i]).collect()
    } else {
        calibration.iter().collect()
    };
    let labels: Vec<usize> =
        chosen.iter().map(|x| Ok(model.predict(&x.sequence())?.label)).collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(candidates.len());
    for &head in candidates {
        let mut flips = 0usize;
        for (x, &y) in chosen.iter().zip(&labels) {
            let set = attention_token(model, x, head, RankOrder::Signed)?;
            let removed: BTreeSet<usize> = set.top(budget).iter().flat_map(|e| e.unit.tokens()).collect();
            let masked = mask_omit(x, &removed, model.mask_token())?;
            if model.predict(&masked)?.label != y {
                flips += 1;
            }
        }
        scores.push((head, flips as f64 / chosen.len() as f64));
    }
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let head = scores.iter().filter(|s| s.1 == best).map(|s| s.0).min().unwrap();
    Ok(HeadSelection { head, scores })
}
