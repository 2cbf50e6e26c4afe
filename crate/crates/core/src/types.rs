//! Domain types shared by every evaluator: two-part instances, explanation
//! units, ranked attribution sets and gold annotations.
//!
//! Token indices are global: `0..m` addresses part1 and `m..m+n` addresses
//! part2. Span endpoints are inclusive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A two-part classification input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub part1: Vec<String>,
    pub part2: Vec<String>,
    pub label: usize,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        part1: Vec<String>,
        part2: Vec<String>,
        label: usize,
    ) -> Result<Self> {
        let inst = Instance { id: id.into(), part1, part2, label };
        inst.validate()?;
        Ok(inst)
    }

    /// Convenience constructor for tests and fixtures.
    pub fn from_strs(id: &str, part1: &[&str], part2: &[&str], label: usize) -> Result<Self> {
        Self::new(
            id,
            part1.iter().map(|s| s.to_string()).collect(),
            part2.iter().map(|s| s.to_string()).collect(),
            label,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.part1.is_empty() || self.part2.is_empty() {
            return Err(Error::validation(&self.id, "both parts need at least one token"));
        }
        if self.tokens().any(|t| t.is_empty()) {
            return Err(Error::validation(&self.id, "empty token"));
        }
        Ok(())
    }

    /// Length of part1.
    pub fn m(&self) -> usize {
        self.part1.len()
    }

    /// Length of part2.
    pub fn n(&self) -> usize {
        self.part2.len()
    }

    pub fn len(&self) -> usize {
        self.m() + self.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.part1.iter().chain(self.part2.iter())
    }

    /// The concatenated global token sequence.
    pub fn sequence(&self) -> Vec<String> {
        self.tokens().cloned().collect()
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        if i < self.m() {
            Some(&self.part1[i])
        } else {
            self.part2.get(i - self.m()).map(String::as_str)
        }
    }

    pub fn in_part1(&self, i: usize) -> bool {
        i < self.m()
    }

    pub fn in_part2(&self, i: usize) -> bool {
        i >= self.m() && i < self.len()
    }
}

/// Explanation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    TokenEx,
    TokenIntEx,
    SpanIntEx,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::TokenEx, Kind::TokenIntEx, Kind::SpanIntEx];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::TokenEx => "TokenEx",
            Kind::TokenIntEx => "TokenIntEx",
            Kind::SpanIntEx => "SpanIntEx",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single piece of explanation: a token, a cross-part token pair, or a
/// cross-part span pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    Token(usize),
    TokenPair(usize, usize),
    /// `(s, s + l1)` in part1 and `(t, t + l2)` in part2, endpoints inclusive.
    SpanPair((usize, usize), (usize, usize)),
}

impl Unit {
    pub fn kind(&self) -> Kind {
        match self {
            Unit::Token(_) => Kind::TokenEx,
            Unit::TokenPair(..) => Kind::TokenIntEx,
            Unit::SpanPair(..) => Kind::SpanIntEx,
        }
    }

    /// Token indices covered by this unit, ascending.
    pub fn tokens(&self) -> Vec<usize> {
        match *self {
            Unit::Token(i) => vec![i],
            Unit::TokenPair(p, q) => vec![p, q],
            Unit::SpanPair((s, se), (t, te)) => (s..=se).chain(t..=te).collect(),
        }
    }

    /// Ordering key used to break score ties: first index, then second index.
    pub fn tie_key(&self) -> (usize, usize, usize, usize) {
        match *self {
            Unit::Token(i) => (i, 0, 0, 0),
            Unit::TokenPair(p, q) => (p, q, 0, 0),
            Unit::SpanPair((s, se), (t, te)) => (s, t, se, te),
        }
    }

    /// Check the index constraints of the unit against an instance with
    /// part lengths `m` and `n`.
    pub fn check(&self, m: usize, n: usize) -> std::result::Result<(), String> {
        let total = m + n;
        match *self {
            Unit::Token(i) if i < total => Ok(()),
            Unit::Token(i) => Err(format!("token {i} outside [0, {total})")),
            Unit::TokenPair(p, q) if p < m && q >= m && q < total => Ok(()),
            Unit::TokenPair(p, q) => {
                Err(format!("pair ({p},{q}) must have p in [0,{m}) and q in [{m},{total})"))
            }
            Unit::SpanPair((s, se), (t, te)) => {
                if s > se || t > te {
                    Err(format!("span pair ({s},{se},{t},{te}) has reversed endpoints"))
                } else if se >= m || t < m || te >= total {
                    Err(format!(
                        "span pair ({s},{se},{t},{te}) must lie in [0,{m}) x [{m},{total})"
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Wire encoding: `[i]`, `[p, q]` or `[s, s+l1, t, t+l2]`.
    pub fn encode(&self) -> Vec<usize> {
        match *self {
            Unit::Token(i) => vec![i],
            Unit::TokenPair(p, q) => vec![p, q],
            Unit::SpanPair((s, se), (t, te)) => vec![s, se, t, te],
        }
    }

    pub fn decode(kind: Kind, raw: &[usize]) -> std::result::Result<Unit, String> {
        match (kind, raw) {
            (Kind::TokenEx, [i]) => Ok(Unit::Token(*i)),
            (Kind::TokenIntEx, [p, q]) => Ok(Unit::TokenPair(*p, *q)),
            (Kind::SpanIntEx, [s, se, t, te]) => Ok(Unit::SpanPair((*s, *se), (*t, *te))),
            _ => Err(format!("{kind} unit cannot have {} indices", raw.len())),
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.kind(), self.encode())
    }
}

/// Union of token indices covered by `units`.
pub fn tokens_of<'a, I>(units: I) -> BTreeSet<usize>
where
    I: IntoIterator<Item = &'a Unit>,
{
    units.into_iter().flat_map(|u| u.tokens()).collect()
}

/// How entries are ordered before any top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankOrder {
    /// Signed score, descending.
    #[default]
    Signed,
    /// Absolute score, descending.
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub unit: Unit,
    pub score: f64,
}

impl Entry {
    pub fn new(unit: Unit, score: f64) -> Self {
        Entry { unit, score }
    }
}

/// Sort entries by the ranking rule: score descending, ties by smaller first
/// index then smaller second index.
pub fn rank_entries(mut entries: Vec<Entry>, order: RankOrder) -> Result<Vec<Entry>> {
    if let Some(bad) = entries.iter().find(|e| !e.score.is_finite()) {
        return Err(Error::NonFinite { unit: bad.unit.to_string(), score: bad.score });
    }
    let key = |e: &Entry| match order {
        RankOrder::Signed => e.score,
        RankOrder::Magnitude => e.score.abs(),
    };
    entries.sort_by(|a, b| {
        key(b)
            .total_cmp(&key(a))
            .then_with(|| a.unit.tie_key().cmp(&b.unit.tie_key()))
    });
    Ok(entries)
}

/// A ranked list of scored explanation units for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionSet {
    pub instance_id: String,
    pub kind: Kind,
    pub method: String,
    pub entries: Vec<Entry>,
    /// Non-fatal notes raised while producing the set (solver fallbacks,
    /// skipped communities). Not part of the wire format.
    pub warnings: Vec<String>,
}

impl AttributionSet {
    /// Build a ranked set, checking kind homogeneity and distinctness.
    pub fn new(
        instance_id: impl Into<String>,
        kind: Kind,
        method: impl Into<String>,
        entries: Vec<Entry>,
        order: RankOrder,
    ) -> Result<Self> {
        let instance_id = instance_id.into();
        if let Some(e) = entries.iter().find(|e| e.unit.kind() != kind) {
            return Err(Error::validation(
                &instance_id,
                format!("unit {} in a {kind} set", e.unit),
            ));
        }
        let distinct: BTreeSet<Unit> = entries.iter().map(|e| e.unit).collect();
        if distinct.len() != entries.len() {
            return Err(Error::validation(&instance_id, "duplicate units in attribution set"));
        }
        let entries = rank_entries(entries, order)?;
        Ok(AttributionSet { instance_id, kind, method: method.into(), entries, warnings: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn units(&self) -> impl Iterator<Item = &Unit> {
        self.entries.iter().map(|e| &e.unit)
    }

    pub fn top(&self, k: usize) -> &[Entry] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Check every unit against the instance, and the size bounds per kind.
    pub fn validate_for(&self, inst: &Instance) -> Result<()> {
        if self.instance_id != inst.id {
            return Err(Error::Contract(format!(
                "attribution set for {} checked against instance {}",
                self.instance_id, inst.id
            )));
        }
        for e in &self.entries {
            e.unit.check(inst.m(), inst.n()).map_err(|msg| Error::validation(&inst.id, msg))?;
        }
        let cap = match self.kind {
            Kind::TokenEx => Some(inst.len()),
            Kind::TokenIntEx => Some(inst.m() * inst.n()),
            Kind::SpanIntEx => None,
        };
        if let Some(cap) = cap {
            if self.len() > cap {
                return Err(Error::validation(
                    &inst.id,
                    format!("{} entries exceed the {} limit {cap}", self.len(), self.kind),
                ));
            }
        }
        Ok(())
    }

    pub fn to_wire(&self) -> AttributionRecord {
        AttributionRecord {
            id: self.instance_id.clone(),
            kind: self.kind.as_str().to_string(),
            method: self.method.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| WireEntry { unit: e.unit.encode(), score: e.score })
                .collect(),
        }
    }

    /// Rebuild from the wire form; entries are re-ranked under `order`.
    pub fn from_wire(rec: AttributionRecord, order: RankOrder) -> Result<Self> {
        let kind = Kind::parse(&rec.kind)
            .ok_or_else(|| Error::validation(&rec.id, format!("unknown kind {}", rec.kind)))?;
        let entries = rec
            .entries
            .iter()
            .map(|w| {
                Unit::decode(kind, &w.unit)
                    .map(|u| Entry::new(u, w.score))
                    .map_err(|msg| Error::validation(&rec.id, msg))
            })
            .collect::<Result<Vec<_>>>()?;
        AttributionSet::new(rec.id, kind, rec.method, entries, order)
    }
}

/// Every attribution set one method produced for one kind, keyed by
/// instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanations {
    pub method: String,
    pub kind: Kind,
    pub sets: BTreeMap<String, AttributionSet>,
}

impl Explanations {
    pub fn new(method: impl Into<String>, kind: Kind, sets: Vec<AttributionSet>) -> Result<Self> {
        let method = method.into();
        let mut map = BTreeMap::new();
        for set in sets {
            if set.kind != kind {
                return Err(Error::validation(&set.instance_id, format!("{} set among {kind} explanations", set.kind)));
            }
            let id = set.instance_id.clone();
            if map.insert(id.clone(), set).is_some() {
                return Err(Error::Conflict(format!("two {method} {kind} sets for instance {id}")));
            }
        }
        Ok(Explanations { method, kind, sets: map })
    }

    pub fn get(&self, id: &str) -> Option<&AttributionSet> {
        self.sets.get(id)
    }

    /// `method/kind`, the name used in reports.
    pub fn label(&self) -> String {
        format!("{}/{}", self.method, self.kind)
    }
}

/// JSONL record for one attribution set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub id: String,
    pub kind: String,
    pub method: String,
    pub entries: Vec<WireEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEntry {
    pub unit: Vec<usize>,
    pub score: f64,
}

/// Human reference explanations for one instance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldAnnotation {
    pub instance_id: String,
    pub token_gold: Option<BTreeSet<usize>>,
    pub pair_gold: Option<BTreeSet<Unit>>,
    pub span_gold: Option<BTreeSet<Unit>>,
}

impl GoldAnnotation {
    pub fn is_empty(&self) -> bool {
        self.token_gold.is_none() && self.pair_gold.is_none() && self.span_gold.is_none()
    }

    /// Token-level gold: the native token set if present, otherwise the
    /// tokens covered by the pair and span gold.
    pub fn gold_tokens(&self) -> BTreeSet<usize> {
        if let Some(t) = &self.token_gold {
            return t.clone();
        }
        let mut out = BTreeSet::new();
        for set in [&self.pair_gold, &self.span_gold].into_iter().flatten() {
            out.extend(tokens_of(set.iter()));
        }
        out
    }

    /// Pair-level gold: native pairs, or all cross pairs inside each gold span pair.
    pub fn gold_pairs(&self) -> BTreeSet<Unit> {
        if let Some(p) = &self.pair_gold {
            return p.clone();
        }
        let mut out = BTreeSet::new();
        for unit in self.span_gold.iter().flatten() {
            if let Unit::SpanPair((s, se), (t, te)) = *unit {
                for p in s..=se {
                    for q in t..=te {
                        out.insert(Unit::TokenPair(p, q));
                    }
                }
            }
        }
        out
    }

    pub fn gold_spans(&self) -> BTreeSet<Unit> {
        self.span_gold.clone().unwrap_or_default()
    }

    pub fn validate_for(&self, inst: &Instance) -> Result<()> {
        let units = self
            .token_gold
            .iter()
            .flatten()
            .map(|&i| Unit::Token(i))
            .chain(self.pair_gold.iter().flatten().copied())
            .chain(self.span_gold.iter().flatten().copied());
        for u in units {
            u.check(inst.m(), inst.n()).map_err(|msg| Error::validation(&inst.id, msg))?;
        }
        Ok(())
    }
}
