//! Attribution methods producing all three explanation kinds.
//!
//! Token scores come from Shapley values (exact or kernel-approximated),
//! integrated gradients, or anchor attention. Token-pair scores come from the
//! bivariate (directed, then symmetrised) Shapley values or from pairwise
//! attention. Span-pair scores are derived from any token-pair scores by
//! community detection on the cross-part interaction graph.

mod attention;
mod gradients;
mod kernel;
mod louvain;
mod shapley;

use std::sync::Arc;

use crate::error::Result;
use crate::model::{mask_keep_flags, Model, ModelHandle};
use crate::types::{AttributionSet, Instance};

pub use attention::{attention_interaction, attention_token, select_head, HeadSelection};
pub use gradients::{integrated_gradients, IgResult};
pub use kernel::{kernel_shap, kernel_shap_values, KernelShapOptions, RIDGE_DAMPING};
pub use louvain::{
    louvain_partition, louvain_spans, modularity, InteractionGraph, LouvainOptions,
};
pub use shapley::{
    bivariate_shapley, bivariate_shapley_directed, exact_shapley, shapley_values_exact,
    shapley_weight, ShapleyOptions, ValueTable, DEFAULT_EXACT_CAP,
};

/// Cross-part token-pair scores together with the directed graph they were
/// averaged from; the input to span extraction.
#[derive(Debug, Clone)]
pub struct PairScores {
    pub pairs: AttributionSet,
    /// Directed edge `i -> j`: importance of `i` given `j`.
    pub graph: InteractionGraph,
}

/// A coalition game over `players()` players. Coalitions are membership
/// vectors of length `players()`.
pub trait Game: Sync {
    fn players(&self) -> usize;

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>>;

    fn value(&self, coalition: &[bool]) -> Result<f64> {
        Ok(self.values(&[coalition.to_vec()])?[0])
    }
}

/// A game defined by a plain function; used by oracles and tests.
pub struct FnGame<F> {
    players: usize,
    f: F,
}

impl<F: Fn(&[bool]) -> f64 + Sync> FnGame<F> {
    pub fn new(players: usize, f: F) -> Self {
        FnGame { players, f }
    }
}

impl<F: Fn(&[bool]) -> f64 + Sync> Game for FnGame<F> {
    fn players(&self) -> usize {
        self.players
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
        Ok(coalitions.iter().map(|c| (self.f)(c)).collect())
    }
}

/// Predictions per batch request issued by [`CoalitionGame`].
const BATCH: usize = 256;

/// The token-removal game of an instance: `v(S)` is the model's probability
/// of the target class when only the tokens in `S` are kept and every other
/// position is masked.
#[derive(Clone)]
pub struct CoalitionGame {
    pub instance: Instance,
    pub model: ModelHandle,
    /// The model's predicted label on the unperturbed input.
    pub target: usize,
    tokens: Vec<String>,
}

impl CoalitionGame {
    pub fn new(model: ModelHandle, instance: &Instance) -> Result<Self> {
        let tokens = instance.sequence();
        let target = model.predict(&tokens)?.label;
        Ok(CoalitionGame { instance: instance.clone(), model, target, tokens })
    }

    pub fn with_target(model: ModelHandle, instance: &Instance, target: usize) -> Self {
        CoalitionGame { instance: instance.clone(), tokens: instance.sequence(), model, target }
    }

    pub fn model(&self) -> &Arc<dyn Model> {
        &self.model
    }
}

impl Game for CoalitionGame {
    fn players(&self) -> usize {
        self.tokens.len()
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
        let mask = self.model.mask_token();
        let chunks: Vec<&[Vec<bool>]> = coalitions.chunks(BATCH).collect();
        let run = |chunk: &&[Vec<bool>]| -> Result<Vec<f64>> {
            let batch: Vec<Vec<String>> =
                chunk.iter().map(|c| mask_keep_flags(&self.tokens, c, mask)).collect();
            Ok(self
                .model
                .predict_batch(&batch)?
                .into_iter()
                .map(|p| p.probs[self.target])
                .collect())
        };
        let parts: Vec<Result<Vec<f64>>> = if self.model.thread_safe() {
            crate::par::map(&chunks, run)
        } else {
            chunks.iter().map(run).collect()
        };
        let mut out = Vec::with_capacity(coalitions.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }
}
