//! Span extraction: Louvain community detection over the cross-part
//! interaction graph, with each community rendered as contiguous span pairs.

use std::collections::BTreeMap;

use rand::RngExt;

use crate::error::{Error, Result};
use crate::seed;
use crate::types::{AttributionSet, Entry, Kind, RankOrder, Unit};

/// Directed weighted bipartite graph over the global token indices of one
/// instance. Edges only run between the two parts.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    m: usize,
    n: usize,
    weights: Vec<Vec<Option<f64>>>,
}

impl InteractionGraph {
    pub fn new(m: usize, n: usize) -> Self {
        InteractionGraph { m, n, weights: vec![vec![None; m + n]; m + n] }
    }

    pub fn nodes(&self) -> usize {
        self.m + self.n
    }

    pub fn parts(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    fn cross(&self, from: usize, to: usize) -> bool {
        let total = self.m + self.n;
        from < total && to < total && ((from < self.m) != (to < self.m))
    }

    /// Set the weight of `from -> to`. Panics on a within-part edge, which
    /// would be a bug in the caller.
    pub fn add_edge(&mut self, from: usize, to: usize, weight: f64) {
        assert!(self.cross(from, to), "edge {from}->{to} does not cross the part boundary");
        self.weights[from][to] = Some(weight);
    }

    pub fn weight(&self, from: usize, to: usize) -> Option<f64> {
        self.weights.get(from)?.get(to).copied().flatten()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.weights.iter().enumerate().flat_map(|(i, row)| {
            row.iter().enumerate().filter_map(move |(j, w)| w.map(|w| (i, j, w)))
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.edges().find(|(_, _, w)| !w.is_finite()) {
            Some((i, j, w)) => Err(Error::NonFinite { unit: format!("edge {i}->{j}"), score: w }),
            None => Ok(()),
        }
    }

    /// Undirected adjacency used for clustering: every present edge shifted
    /// by `min(0, smallest weight)`, then `A[i][j] = w'(i->j) + w'(j->i)`.
    pub fn adjacency(&self) -> Vec<Vec<f64>> {
        let min = self.edges().map(|(_, _, w)| w).fold(0.0, f64::min);
        let size = self.nodes();
        let mut a = vec![vec![0.0; size]; size];
        for (i, j, w) in self.edges() {
            let w = w - min;
            a[i][j] += w;
            a[j][i] += w;
        }
        a
    }
}

#[derive(Debug, Clone)]
pub struct LouvainOptions {
    pub resolution: f64,
    pub seed: u64,
}

impl Default for LouvainOptions {
    fn default() -> Self {
        LouvainOptions { resolution: 1.0, seed: 0 }
    }
}

/// Modularity of `partition` on the clustering adjacency of `graph`.
pub fn modularity(graph: &InteractionGraph, partition: &[usize], resolution: f64) -> f64 {
    modularity_dense(&graph.adjacency(), partition, resolution)
}

fn modularity_dense(a: &[Vec<f64>], partition: &[usize], resolution: f64) -> f64 {
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let m2: f64 = k.iter().sum();
    if m2 == 0.0 {
        return 0.0;
    }
    let mut inside = BTreeMap::<usize, f64>::new();
    let mut total = BTreeMap::<usize, f64>::new();
    for i in 0..a.len() {
        *total.entry(partition[i]).or_default() += k[i];
        for j in 0..a.len() {
            if partition[i] == partition[j] {
                *inside.entry(partition[i]).or_default() += a[i][j];
            }
        }
    }
    total
        .iter()
        .map(|(c, t)| inside.get(c).copied().unwrap_or(0.0) / m2 - resolution * (t / m2).powi(2))
        .sum()
}

/// Relabel communities to 0.. in order of first appearance.
fn relabel(comm: &mut [usize]) -> usize {
    let mut map = BTreeMap::new();
    for c in comm.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// One local-moving phase. Returns the community of every node and whether
/// any node moved.
fn local_moving(a: &[Vec<f64>], resolution: f64, rng: &mut impl RngExt) -> (Vec<usize>, bool) {
    let size = a.len();
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let m2: f64 = k.iter().sum();
    let mut comm: Vec<usize> = (0..size).collect();
    if m2 == 0.0 {
        return (comm, false);
    }
    let mut total = k.clone();
    let mut any = false;
    let mut links = vec![0.0; size];
    for _pass in 0..1000 {
        let mut moved = false;
        for i in 0..size {
            let own = comm[i];
            total[own] -= k[i];
            let mut candidates = vec![own];
            for j in 0..size {
                if j != i && a[i][j] > 0.0 {
                    if links[comm[j]] == 0.0 && comm[j] != own {
                        candidates.push(comm[j]);
                    }
                    links[comm[j]] += a[i][j];
                }
            }
            let gain = |c: usize| links[c] - resolution * total[c] * k[i] / m2;
            let best = candidates.iter().map(|&c| gain(c)).fold(f64::NEG_INFINITY, f64::max);
            let eps = 1e-12 * (1.0 + best.abs());
            let target = if gain(own) >= best - eps {
                own
            } else {
                let ties: Vec<usize> = candidates.iter().copied().filter(|&c| gain(c) >= best - eps).collect();
                if ties.len() == 1 {
                    ties[0]
                } else {
                    ties[rng.random_range(0..ties.len())]
                }
            };
            for &c in &candidates {
                links[c] = 0.0;
            }
            total[target] += k[i];
            if target != own {
                comm[i] = target;
                moved = true;
                any = true;
            }
        }
        if !moved {
            break;
        }
    }
    (comm, any)
}

/// Community label of every node, numbered in order of first appearance.
pub fn louvain_partition(graph: &InteractionGraph, opts: &LouvainOptions) -> Result<Vec<usize>> {
    graph.validate()?;
    let mut a = graph.adjacency();
    let mut assignment: Vec<usize> = (0..graph.nodes()).collect();
    let mut rng = seed::rng(opts.seed, "louvain", graph.nodes() as u64);
    loop {
        let (mut comm, moved) = local_moving(&a, opts.resolution, &mut rng);
        if !moved {
            break;
        }
        let count = relabel(&mut comm);
        for c in assignment.iter_mut() {
            *c = comm[*c];
        }
        let mut next = vec![vec![0.0; count]; count];
        for (i, row) in a.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                next[comm[i]][comm[j]] += w;
            }
        }
        a = next;
    }
    relabel(&mut assignment);
    Ok(assignment)
}

/// Maximal runs of consecutive integers in an ascending list, as inclusive
/// `(start, end)` pairs.
pub(crate) fn contiguous_runs(sorted: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &i in sorted {
        match runs.last_mut() {
            Some((_, end)) if *end + 1 == i => *end = i,
            _ => runs.push((i, i)),
        }
    }
    runs
}

/// Span-pair attributions from token-pair scores and their directed graph.
/// Each span pair scores the sum of its cross pair scores over its token count.
pub fn louvain_spans(
    pairs: &AttributionSet,
    graph: &InteractionGraph,
    opts: &LouvainOptions,
    order: RankOrder,
) -> Result<AttributionSet> {
    if pairs.kind != Kind::TokenIntEx {
        return Err(Error::Contract(format!("span extraction needs token pairs, got {}", pairs.kind)));
    }
    let (m, _) = graph.parts();
    let mut score = BTreeMap::new();
    for e in &pairs.entries {
        if let Unit::TokenPair(p, q) = e.unit {
            if p >= graph.nodes() || q >= graph.nodes() {
                return Err(Error::validation(&pairs.instance_id, format!("pair ({p},{q}) outside the graph")));
            }
            score.insert((p, q), e.score);
        }
    }
    let partition = louvain_partition(graph, opts)?;
    let communities = partition.iter().max().map_or(0, |c| c + 1);
    let mut entries = Vec::new();
    let mut one_sided = 0;
    for c in 0..communities {
        let members: Vec<usize> = (0..partition.len()).filter(|&i| partition[i] == c).collect();
        let left: Vec<usize> = members.iter().copied().filter(|&i| i < m).collect();
        let right: Vec<usize> = members.iter().copied().filter(|&i| i >= m).collect();
        if left.is_empty() || right.is_empty() {
            one_sided += 1;
            continue;
        }
        for &(s, se) in &contiguous_runs(&left) {
            for &(t, te) in &contiguous_runs(&right) {
                let mut sum = 0.0;
                for p in s..=se {
                    for q in t..=te {
                        sum += score.get(&(p, q)).copied().unwrap_or(0.0);
                    }
                }
                let tokens = (se - s + 1) + (te - t + 1);
                entries.push(Entry::new(Unit::SpanPair((s, se), (t, te)), sum / tokens as f64));
            }
        }
    }
    let mut set = AttributionSet::new(&pairs.instance_id, Kind::SpanIntEx, &pairs.method, entries, order)?;
    if one_sided > 0 {
        set.warnings.push(format!("{one_sided} of {communities} communities lie within one part; no span emitted"));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs_from(graph: &InteractionGraph) -> AttributionSet {
        let (m, n) = graph.parts();
        let mut entries = Vec::new();
        for p in 0..m {
            for q in m..m + n {
                let w = 0.5 * (graph.weight(p, q).unwrap_or(0.0) + graph.weight(q, p).unwrap_or(0.0));
                entries.push(Entry::new(Unit::TokenPair(p, q), w));
            }
        }
        AttributionSet::new("x", Kind::TokenIntEx, "test", entries, RankOrder::Signed).unwrap()
    }

    fn two_blocks() -> InteractionGraph {
        let mut g = InteractionGraph::new(4, 4);
        for (p, q) in [(0, 4), (0, 5), (1, 4), (1, 5), (2, 6), (2, 7), (3, 6), (3, 7)] {
            g.add_edge(p, q, 1.0);
            g.add_edge(q, p, 1.0);
        }
        g
    }

    #[test]
    fn two_blocks_give_two_span_pairs() {
        let g = two_blocks();
        let part = louvain_partition(&g, &LouvainOptions::default()).unwrap();
        assert_eq!(part, vec![0, 0, 1, 1, 0, 0, 1, 1]);
        let spans = louvain_spans(&pairs_from(&g), &g, &LouvainOptions::default(), RankOrder::Signed).unwrap();
        let units: Vec<Unit> = spans.units().copied().collect();
        assert_eq!(units, vec![Unit::SpanPair((0, 1), (4, 5)), Unit::SpanPair((2, 3), (6, 7))]);
        // four pairs of score 1 over four tokens
        assert!(spans.entries.iter().all(|e| e.score == 1.0));
        assert!(spans.warnings.is_empty());
    }

    #[test]
    fn single_edge_scores_half() {
        let mut g = InteractionGraph::new(2, 2);
        g.add_edge(1, 2, 0.8);
        g.add_edge(2, 1, 0.4);
        let spans = louvain_spans(&pairs_from(&g), &g, &LouvainOptions::default(), RankOrder::Signed).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans.entries[0].unit, Unit::SpanPair((1, 1), (2, 2)));
        assert!((spans.entries[0].score - 0.3).abs() < 1e-15);
        // the isolated tokens form one-sided singletons
        assert_eq!(spans.warnings.len(), 1);
    }

    #[test]
    fn runs_split_on_gaps() {
        assert_eq!(contiguous_runs(&[0, 1, 3]), vec![(0, 1), (3, 3)]);
        assert_eq!(contiguous_runs(&[]), vec![]);
        assert_eq!(contiguous_runs(&[5]), vec![(5, 5)]);
    }

    #[test]
    fn non_contiguous_community_yields_cross_product() {
        // tokens 0, 1 and 3 of part1 all tie to token 4 of part2; token 2 to 5
        let mut g = InteractionGraph::new(4, 2);
        for p in [0, 1, 3] {
            g.add_edge(p, 4, 1.0);
            g.add_edge(4, p, 1.0);
        }
        g.add_edge(2, 5, 1.0);
        g.add_edge(5, 2, 1.0);
        let spans = louvain_spans(&pairs_from(&g), &g, &LouvainOptions::default(), RankOrder::Signed).unwrap();
        let units: std::collections::BTreeSet<Unit> = spans.units().copied().collect();
        assert!(units.contains(&Unit::SpanPair((0, 1), (4, 4))));
        assert!(units.contains(&Unit::SpanPair((3, 3), (4, 4))));
        assert!(units.contains(&Unit::SpanPair((2, 2), (5, 5))));
    }

    #[test]
    fn negative_weights_are_shifted_for_clustering_only() {
        let mut g = InteractionGraph::new(1, 1);
        g.add_edge(0, 1, -0.5);
        g.add_edge(1, 0, 1.0);
        let a = g.adjacency();
        assert_eq!(a[0][1], 1.5);
        let spans = louvain_spans(&pairs_from(&g), &g, &LouvainOptions::default(), RankOrder::Signed).unwrap();
        assert!((spans.entries[0].score - 0.125).abs() < 1e-15);
    }

    #[test]
    fn modularity_of_two_blocks() {
        // two disconnected equal blocks: Q = 2 * (1/2 - 1/4)
        let g = two_blocks();
        assert!((modularity(&g, &[0, 0, 1, 1, 0, 0, 1, 1], 1.0) - 0.5).abs() < 1e-12);
        assert!(modularity(&g, &[0; 8], 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_weights() {
        let mut g = InteractionGraph::new(1, 1);
        g.add_edge(0, 1, f64::NAN);
        assert!(louvain_partition(&g, &LouvainOptions::default()).is_err());
    }

    proptest! {
        #[test]
        fn spans_are_contiguous_and_within_one_community(
            m in 1usize..5, n in 1usize..5,
            weights in proptest::collection::vec(-1.0f64..1.0, 32),
            seed in 0u64..100,
        ) {
            let mut g = InteractionGraph::new(m, n);
            let mut it = weights.iter().cycle();
            for p in 0..m {
                for q in m..m + n {
                    g.add_edge(p, q, *it.next().unwrap());
                    g.add_edge(q, p, *it.next().unwrap());
                }
            }
            let opts = LouvainOptions { seed, ..Default::default() };
            let part = louvain_partition(&g, &opts).unwrap();
            let spans = louvain_spans(&pairs_from(&g), &g, &opts, RankOrder::Signed).unwrap();
            prop_assert_eq!(&spans, &louvain_spans(&pairs_from(&g), &g, &opts, RankOrder::Signed).unwrap());
            for u in spans.units() {
                prop_assert!(u.check(m, n).is_ok());
                let toks = u.tokens();
                prop_assert!(toks.iter().all(|&t| part[t] == part[toks[0]]));
            }
        }
    }
}
