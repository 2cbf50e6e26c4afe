//! Kernel SHAP: Shapley values as the solution of a weighted least-squares
//! regression over sampled coalitions, with efficiency imposed as an exact
//! linear constraint.
//!
//! Sizes are taken in pairs `(s, M-s)` from the outside in. The budget is
//! split across the remaining pairs in proportion to their Shapley-kernel
//! mass, `(M-1) / (s (M-s))` per size. A pair whose share covers every subset
//! is enumerated, each row weighted by its kernel weight. Once a pair does not
//! fit, the rest of the budget is drawn: a size with probability proportional
//! to its mass, then a uniform subset of that size, paired with its
//! complement. Drawn rows split the leftover mass evenly. The empty and full
//! coalitions enter only through the constraint.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::RngExt;

use crate::attribution::{CoalitionGame, Game};
use crate::error::{Error, Result};
use crate::seed;
use crate::types::{AttributionSet, Entry, Kind, RankOrder, Unit};

/// Ridge term added to the normal equations when they are singular.
pub const RIDGE_DAMPING: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct KernelShapOptions {
    pub samples: usize,
    pub seed: u64,
    pub order: RankOrder,
    /// Test hook: scales the solved values, breaking efficiency on purpose.
    #[doc(hidden)]
    pub corrupt_weights: bool,
}

impl Default for KernelShapOptions {
    fn default() -> Self {
        KernelShapOptions { samples: 4096, seed: 0, order: RankOrder::Signed, corrupt_weights: false }
    }
}

pub(crate) struct KernelFit {
    pub phi: Vec<f64>,
    pub damped: bool,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Every subset of `players` with exactly `size` members, in lexicographic
/// order of member indices.
fn subsets_of_size(players: usize, size: usize, out: &mut Vec<Vec<bool>>) {
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        let mut member = vec![false; players];
        idx.iter().for_each(|&i| member[i] = true);
        out.push(member);
        let Some(p) = (0..size).rev().find(|&p| idx[p] != p + players - size) else { return };
        idx[p] += 1;
        for q in p + 1..size {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// Coalitions for the regression and the weight of each.
fn design(players: usize, samples: usize, seed: u64) -> (Vec<Vec<bool>>, Vec<f64>) {
    let m = players;
    let mass = |s: usize| (m - 1) as f64 / (s * (m - s)) as f64;
    let mut pairs: Vec<usize> = (1..=m / 2).collect();
    let pair_mass = |s: usize| if 2 * s == m { mass(s) } else { 2.0 * mass(s) };
    let pair_count = |s: usize| if 2 * s == m { binomial(m, s) } else { 2.0 * binomial(m, s) };

    let (mut rows, mut weights) = (Vec::new(), Vec::new());
    let mut budget = samples as f64;
    let mut left: f64 = pairs.iter().map(|&s| pair_mass(s)).sum();
    while let Some(&s) = pairs.first() {
        if budget * pair_mass(s) / left < pair_count(s) - 1e-9 {
            break;
        }
        let before = rows.len();
        subsets_of_size(m, s, &mut rows);
        if 2 * s != m {
            subsets_of_size(m, m - s, &mut rows);
        }
        let w = mass(s) / binomial(m, s);
        weights.resize(rows.len(), w);
        budget -= (rows.len() - before) as f64;
        left -= pair_mass(s);
        pairs.remove(0);
    }
    let draws = budget.max(0.0) as usize;
    if pairs.is_empty() || draws == 0 {
        return (rows, weights);
    }

    let mut rng = seed::rng(seed, "kernel-shap", players as u64);
    let sizes: Vec<usize> = pairs.iter().flat_map(|&s| if 2 * s == m { vec![s] } else { vec![s, m - s] }).collect();
    let size_mass: Vec<f64> = sizes.iter().map(|&s| mass(s)).collect();
    let total: f64 = size_mass.iter().sum();
    let start = rows.len();
    while rows.len() - start < draws {
        let mut u = rng.random::<f64>() * total;
        let mut size = *sizes.last().unwrap();
        for (&s, &w) in sizes.iter().zip(&size_mass) {
            if u < w {
                size = s;
                break;
            }
            u -= w;
        }
        let mut member = vec![false; players];
        for i in index::sample(&mut rng, players, size) {
            member[i] = true;
        }
        let complement = member.iter().map(|b| !b).collect();
        rows.push(member);
        rows.push(complement);
    }
    rows.truncate(start + draws);
    weights.resize(rows.len(), left / draws as f64);
    (rows, weights)
}

pub(crate) fn kernel_fit(game: &dyn Game, samples: usize, seed: u64) -> Result<KernelFit> {
    let m = game.players();
    if m == 0 {
        return Ok(KernelFit { phi: Vec::new(), damped: false });
    }
    if samples < m + 2 {
        return Err(Error::Contract(format!("kernel SHAP needs at least {} samples, got {samples}", m + 2)));
    }
    let mut coalitions = vec![vec![false; m], vec![true; m]];
    let mut weights = Vec::new();
    if m > 1 {
        let (rows, w) = design(m, samples, seed);
        coalitions.extend(rows);
        weights = w;
    }
    let values = game.values(&coalitions)?;
    let (v_empty, v_full) = (values[0], values[1]);
    if m == 1 {
        return Ok(KernelFit { phi: vec![v_full - v_empty], damped: false });
    }

    solve_constrained(&coalitions[2..], &weights, &values[2..], v_empty, v_full)
}

/// Weighted least squares `v(S) - v(empty) ~ sum_{i in S} phi_i` over `rows`
/// subject to `sum(phi) = v_full - v_empty`.
pub(crate) fn solve_constrained(
    rows: &[Vec<bool>],
    weights: &[f64],
    values: &[f64],
    v_empty: f64,
    v_full: f64,
) -> Result<KernelFit> {
    let m = rows[0].len();
    let delta = v_full - v_empty;
    // eliminate the last player through the constraint
    let cols = m - 1;
    let last = m - 1;
    let a = DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c] as u8 as f64 - rows[r][last] as u8 as f64);
    let b = DVector::from_fn(rows.len(), |r, _| values[r] - v_empty - rows[r][last] as u8 as f64 * delta);
    let wa = DMatrix::from_fn(rows.len(), cols, |r, c| weights[r] * a[(r, c)]);
    let ata = wa.transpose() * &a;
    let atb = wa.transpose() * b;
    let (reduced, damped) = match ata.clone().cholesky() {
        Some(chol) => (chol.solve(&atb), false),
        None => {
            let damped = ata + DMatrix::identity(cols, cols) * RIDGE_DAMPING;
            let sol = damped
                .lu()
                .solve(&atb)
                .ok_or_else(|| Error::Degenerate("kernel SHAP system is singular even after damping".into()))?;
            (sol, true)
        }
    };
    let mut phi: Vec<f64> = reduced.iter().copied().collect();
    phi.push(delta - phi.iter().sum::<f64>());
    Ok(KernelFit { phi, damped })
}

/// Kernel SHAP estimates for a generic game, and whether ridge damping was
/// needed.
pub fn kernel_shap_values(game: &dyn Game, samples: usize, seed: u64) -> Result<(Vec<f64>, bool)> {
    let fit = kernel_fit(game, samples, seed)?;
    Ok((fit.phi, fit.damped))
}

/// Token attributions approximated from `opts.samples` sampled coalitions.
pub fn kernel_shap(game: &CoalitionGame, opts: &KernelShapOptions) -> Result<AttributionSet> {
    let mut fit = kernel_fit(game, opts.samples, opts.seed)?;
    if opts.corrupt_weights {
        fit.phi.iter_mut().for_each(|p| *p *= 1.05);
    }
    let entries = fit.phi.iter().enumerate().map(|(i, &s)| Entry::new(Unit::Token(i), s)).collect();
    let mut set = AttributionSet::new(&game.instance.id, Kind::TokenEx, "shapley-kernel", entries, opts.order)?;
    if fit.damped {
        set.warnings.push(format!("singular regression; ridge damping {RIDGE_DAMPING:e} applied"));
    }
    Ok(set)
}
