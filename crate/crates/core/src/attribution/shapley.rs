//! Exact Shapley values by coalition enumeration, and the bivariate
//! (directed) variant that only counts coalitions containing a partner token.
//!
//! The directed score `Shap(i | j)` is reported as the expected marginal
//! contribution of `i` over orderings in which `j` precedes `i`. That is the
//! restricted-subset sum with Shapley weights, renormalised by the weight mass
//! of the restriction (exactly 1/2), so it agrees with the permutation
//! sampler used beyond the enumeration cap and reduces to `w_i` on additive
//! games.

use rand::seq::SliceRandom;

use crate::attribution::{CoalitionGame, Game, InteractionGraph, PairScores};
use crate::error::{Error, Result};
use crate::seed;
use crate::types::{AttributionSet, Entry, Kind, RankOrder, Unit};

/// Largest player count enumerated exactly by default.
pub const DEFAULT_EXACT_CAP: usize = 14;

#[derive(Debug, Clone)]
pub struct ShapleyOptions {
    pub cap: usize,
    /// Permutations per ordered pair for directed sampling beyond the cap.
    pub permutations: usize,
    pub seed: u64,
    pub order: RankOrder,
}

impl Default for ShapleyOptions {
    fn default() -> Self {
        ShapleyOptions { cap: DEFAULT_EXACT_CAP, permutations: 2000, seed: 0, order: RankOrder::Signed }
    }
}

/// `|S|! (N - |S| - 1)! / N!`
pub fn shapley_weight(players: usize, size: usize) -> f64 {
    debug_assert!(size < players);
    // product form avoids large factorials: 1 / (N * C(N-1, size))
    let mut binom = 1.0;
    for k in 0..size {
        binom = binom * (players - 1 - k) as f64 / (k + 1) as f64;
    }
    1.0 / (players as f64 * binom)
}

/// Every coalition value of a game, indexed by membership bitmask.
#[derive(Debug, Clone)]
pub struct ValueTable {
    players: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn build(game: &dyn Game, cap: usize) -> Result<Self> {
        let players = game.players();
        if players > cap || players >= usize::BITS as usize {
            return Err(Error::EnumerationCap { players, cap });
        }
        let coalitions: Vec<Vec<bool>> = (0..1usize << players)
            .map(|mask| (0..players).map(|i| mask >> i & 1 == 1).collect())
            .collect();
        let values = game.values(&coalitions)?;
        Ok(ValueTable { players, values })
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn get(&self, mask: usize) -> f64 {
        self.values[mask]
    }

    pub fn shapley(&self) -> Vec<f64> {
        let n = self.players;
        let weights: Vec<f64> = (0..n).map(|s| shapley_weight(n, s)).collect();
        let mut phi = vec![0.0; n];
        for (i, phi_i) in phi.iter_mut().enumerate() {
            let bit = 1 << i;
            let mut acc = 0.0;
            for mask in 0..self.values.len() {
                if mask & bit == 0 {
                    let size = mask.count_ones() as usize;
                    acc += weights[size] * (self.values[mask | bit] - self.values[mask]);
                }
            }
            *phi_i = acc;
        }
        phi
    }

    /// Matrix `d[i][j] = Shap(i | j)` for every ordered pair `i != j`.
    pub fn directed_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.players;
        let weights: Vec<f64> = (0..n).map(|s| 2.0 * shapley_weight(n, s)).collect();
        let mut d = vec![vec![0.0; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            let bit = 1 << i;
            for mask in 0..self.values.len() {
                if mask & bit != 0 || mask == 0 {
                    continue;
                }
                let contrib = weights[mask.count_ones() as usize]
                    * (self.values[mask | bit] - self.values[mask]);
                let mut rest = mask;
                while rest != 0 {
                    let j = rest.trailing_zeros() as usize;
                    row[j] += contrib;
                    rest &= rest - 1;
                }
            }
        }
        d
    }

    pub fn directed(&self, i: usize, j: usize) -> f64 {
        let n = self.players;
        let (bi, bj) = (1 << i, 1 << j);
        let mut acc = 0.0;
        for mask in 0..self.values.len() {
            if mask & bi == 0 && mask & bj != 0 {
                let size = mask.count_ones() as usize;
                acc += 2.0 * shapley_weight(n, size) * (self.values[mask | bi] - self.values[mask]);
            }
        }
        acc
    }
}

/// Exact Shapley values of a generic game.
pub fn shapley_values_exact(game: &dyn Game, cap: usize) -> Result<Vec<f64>> {
    Ok(ValueTable::build(game, cap)?.shapley())
}

/// Token attributions by exact enumeration.
pub fn exact_shapley(game: &CoalitionGame, opts: &ShapleyOptions) -> Result<AttributionSet> {
    let phi = shapley_values_exact(game, opts.cap)?;
    let entries = phi.iter().enumerate().map(|(i, &s)| Entry::new(Unit::Token(i), s)).collect();
    AttributionSet::new(&game.instance.id, Kind::TokenEx, "shapley", entries, opts.order)
}

/// `Shap(i | j)` for one ordered pair: exact within the cap, otherwise
/// averaged over `opts.permutations` orderings with `j` before `i`.
pub fn bivariate_shapley_directed(
    game: &dyn Game,
    i: usize,
    j: usize,
    opts: &ShapleyOptions,
) -> Result<f64> {
    let n = game.players();
    if i == j {
        return Err(Error::Contract(format!("directed Shapley needs distinct tokens, got {i} twice")));
    }
    if i >= n || j >= n {
        return Err(Error::Contract(format!("token out of range for {n} players")));
    }
    if n <= opts.cap {
        return Ok(ValueTable::build(game, opts.cap)?.directed(i, j));
    }
    let mut rng = seed::rng(opts.seed, "bivariate-pair", (i * n + j) as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mut coalitions = Vec::with_capacity(2 * opts.permutations);
    for _ in 0..opts.permutations {
        order.shuffle(&mut rng);
        let pi = order.iter().position(|&p| p == i).unwrap();
        let pj = order.iter().position(|&p| p == j).unwrap();
        if pi < pj {
            // swapping i and j maps the orderings with i first one-to-one
            // onto those with j first
            order.swap(pi, pj);
        }
        let at = order.iter().position(|&p| p == i).unwrap();
        let mut before = vec![false; n];
        for &p in &order[..at] {
            before[p] = true;
        }
        let mut with = before.clone();
        with[i] = true;
        coalitions.push(before);
        coalitions.push(with);
    }
    let values = game.values(&coalitions)?;
    let total: f64 = values.chunks(2).map(|c| c[1] - c[0]).sum();
    Ok(total / opts.permutations as f64)
}

/// Directed matrix `d[i][j] = Shap(i | j)` for a whole game, shared
/// permutation sampling beyond the cap.
pub(crate) fn directed_matrix(game: &dyn Game, opts: &ShapleyOptions) -> Result<(Vec<Vec<f64>>, bool)> {
    let n = game.players();
    if n <= opts.cap {
        return Ok((ValueTable::build(game, opts.cap)?.directed_matrix(), false));
    }
    // Each random ordering contributes the marginal of every player to all of
    // its predecessors; with 2P orderings each ordered pair sees about P.
    let total = 2 * opts.permutations;
    let mut rng = seed::rng(opts.seed, "bivariate-all", n as u64);
    let mut orders = Vec::with_capacity(total);
    let mut coalitions = Vec::with_capacity(total * (n + 1));
    for _ in 0..total {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut member = vec![false; n];
        coalitions.push(member.clone());
        for &p in &order {
            member[p] = true;
            coalitions.push(member.clone());
        }
        orders.push(order);
    }
    let values = game.values(&coalitions)?;
    let mut sum = vec![vec![0.0; n]; n];
    let mut count = vec![vec![0usize; n]; n];
    for (t, order) in orders.iter().enumerate() {
        let chain = &values[t * (n + 1)..(t + 1) * (n + 1)];
        for (r, &i) in order.iter().enumerate() {
            let marginal = chain[r + 1] - chain[r];
            for &j in &order[..r] {
                sum[i][j] += marginal;
                count[i][j] += 1;
            }
        }
    }
    let d = sum
        .iter()
        .zip(&count)
        .map(|(s, c)| s.iter().zip(c).map(|(v, &k)| if k == 0 { 0.0 } else { v / k as f64 }).collect())
        .collect();
    Ok((d, true))
}

/// Token-pair attributions for every cross-part pair.
pub fn bivariate_shapley(game: &CoalitionGame, opts: &ShapleyOptions) -> Result<PairScores> {
    let inst = &game.instance;
    let (m, n) = (inst.m(), inst.n());
    let (d, sampled) = directed_matrix(game, opts)?;
    let mut graph = InteractionGraph::new(m, n);
    let mut entries = Vec::with_capacity(m * n);
    for p in 0..m {
        for q in m..m + n {
            graph.add_edge(p, q, d[p][q]);
            graph.add_edge(q, p, d[q][p]);
            entries.push(Entry::new(Unit::TokenPair(p, q), 0.5 * (d[p][q] + d[q][p])));
        }
    }
    let mut pairs =
        AttributionSet::new(&inst.id, Kind::TokenIntEx, "shapley", entries, opts.order)?;
    if sampled {
        pairs.warnings.push(format!("sampled with {} orderings per pair", opts.permutations));
    }
    Ok(PairScores { pairs, graph })
}
