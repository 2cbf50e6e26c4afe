//! Complexity as the entropy of normalised attribution magnitudes over the
//! top `k_x` entries, where `k_x` is the number of span pairs a designated
//! span method produced for the instance.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faithfulness::Skipped;
use crate::seed;
use crate::types::{AttributionSet, Explanations, Instance, Kind};

/// `|a_i| / sum_j |a_j|`.
pub fn normalized_mass(scores: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = scores.iter().map(|s| s.abs()).sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("attribution mass is zero".into()));
    }
    Ok(scores.iter().map(|s| s.abs() / total).collect())
}

/// Shannon entropy in nats; zero-probability terms contribute nothing. A
/// point mass gives +0, not -0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>() + 0.0
}

/// Which entries are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityForm {
    /// Top `k_x` entries.
    #[default]
    Unified,
    /// Every entry of the set.
    Original,
}

/// Entropy of the top `k_x` magnitudes. The flag is set when the set has
/// fewer than `k_x` entries and all of them were used.
pub fn entropy_complexity(attr: &AttributionSet, k_x: usize) -> Result<(f64, bool)> {
    if k_x == 0 {
        return Err(Error::Contract("k_x must be at least 1".into()));
    }
    let top = attr.top(k_x);
    let scores: Vec<f64> = top.iter().map(|e| e.score).collect();
    Ok((entropy(&normalized_mass(&scores)?), top.len() < k_x))
}

#[derive(Debug, Clone, Copy)]
pub struct ComplexityOptions {
    pub seed: u64,
    pub form: ComplexityForm,
}

impl Default for ComplexityOptions {
    fn default() -> Self {
        ComplexityOptions { seed: 0, form: ComplexityForm::Unified }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodComplexity {
    pub method: String,
    pub kind: Kind,
    pub cl: f64,
    pub saturated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub form: ComplexityForm,
    pub seed: u64,
    pub n_instances: usize,
    pub skipped: Vec<Skipped>,
    pub methods: Vec<MethodComplexity>,
    /// Mean entropy of `k_x` uniform draws.
    pub random_ref: f64,
    /// Mean `ln k_x`.
    pub upper_bound: f64,
}

impl ComplexityReport {
    pub fn method(&self, method: &str, kind: Kind) -> Option<&MethodComplexity> {
        self.methods.iter().find(|m| m.method == method && m.kind == kind)
    }
}

/// Entropy of `k` uniform `[0, 1)` scores drawn for instance `index`.
pub fn random_reference(k: usize, master: u64, index: usize) -> f64 {
    let mut rng = seed::rng(master, "complexity-random", index as u64);
    let draws: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    normalized_mass(&draws).map(|p| entropy(&p)).unwrap_or(0.0)
}

pub fn dataset_complexity(
    dataset: &[Instance],
    methods: &[Explanations],
    spans: &Explanations,
    opts: &ComplexityOptions,
) -> Result<ComplexityReport> {
    if spans.kind != Kind::SpanIntEx {
        return Err(Error::Contract(format!("k_x comes from a span method, got {}", spans.label())));
    }
    let mut skipped = Vec::new();
    let mut rows: Vec<(usize, usize, Vec<(f64, bool)>)> = Vec::new();
    'instances: for (idx, x) in dataset.iter().enumerate() {
        let k_x = spans.get(&x.id).map_or(0, |s| s.len());
        if k_x == 0 {
            skipped.push(Skipped { id: x.id.clone(), reason: format!("no {} span pairs", spans.label()) });
            continue;
        }
        let mut values = Vec::with_capacity(methods.len());
        for m in methods {
            let attr = m
                .get(&x.id)
                .ok_or_else(|| Error::validation(&x.id, format!("no {} explanation", m.label())))?;
            let k = match opts.form {
                ComplexityForm::Unified => k_x,
                ComplexityForm::Original => attr.len().max(1),
            };
            match entropy_complexity(attr, k) {
                Ok(v) => values.push(v),
                Err(e) => {
                    skipped.push(Skipped { id: x.id.clone(), reason: format!("{}: {e}", m.label()) });
                    continue 'instances;
                }
            }
        }
        rows.push((idx, k_x, values));
    }
    if rows.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = rows.len() as f64;
    let methods_out = methods
        .iter()
        .enumerate()
        .map(|(mi, m)| MethodComplexity {
            method: m.method.clone(),
            kind: m.kind,
            cl: rows.iter().map(|r| r.2[mi].0).sum::<f64>() / n,
            saturated: rows.iter().filter(|r| r.2[mi].1).count(),
        })
        .collect();
    Ok(ComplexityReport {
        form: opts.form,
        seed: opts.seed,
        n_instances: rows.len(),
        skipped,
        methods: methods_out,
        random_ref: rows.iter().map(|&(idx, k, _)| random_reference(k, opts.seed, idx)).sum::<f64>() / n,
        upper_bound: rows.iter().map(|&(_, k, _)| (k as f64).ln()).sum::<f64>() / n,
    })
}
