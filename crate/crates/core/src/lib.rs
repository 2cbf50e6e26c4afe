//! Explanation generation and unified diagnostics for two-part text
//! classifiers.
//!
//! The engine produces three kinds of highlight explanations for an input
//! made of two token sequences (premise/hypothesis, claim/evidence):
//! per-token scores, cross-part token-pair scores and cross-part span-pair
//! scores. Any such explanation set can then be scored for faithfulness,
//! agreement with human annotations, simulatability and complexity, with
//! token budgets matched across kinds so the numbers are comparable.

pub mod adapter;
pub mod agreement;
pub mod attribution;
pub mod complexity;
pub mod config;
pub mod dataset;
pub mod error;
pub mod faithfulness;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod selfcheck;
pub mod simulatability;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    rank_entries, tokens_of, AttributionSet, Entry, Explanations, GoldAnnotation, Instance, Kind, RankOrder,
    Unit,
};
