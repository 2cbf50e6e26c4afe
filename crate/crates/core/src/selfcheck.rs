//! Built-in sanity suite: estimators against closed forms, exact identities,
//! protocol conformance of the built-in models and the trivial-model
//! invariants. Runs in seconds and prints the same lines on every run.

use std::sync::Arc;

use rand::RngExt;

use crate::adapter::{check_conformance, Check, LoopbackTransport};
use crate::attribution::{
    bivariate_shapley, exact_shapley, integrated_gradients, kernel_shap, kernel_shap_values, louvain_spans,
    shapley_values_exact, CoalitionGame, FnGame, Game, KernelShapOptions, LouvainOptions, ShapleyOptions,
};
use crate::error::Result;
use crate::faithfulness::{unified_faithfulness, FaithfulnessOptions};
use crate::model::{ConstantModel, LinearBowModel, ModelHandle, ToyAttentionModel};
use crate::seed;
use crate::synth::{generate, SynthSpec, MASK};
use crate::types::{Explanations, Instance, Kind, RankOrder};

#[derive(Debug, Clone, Copy, Default)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Break kernel SHAP efficiency on purpose, to see the suite fail.
    pub corrupt_kernel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfcheckReport {
    pub checks: Vec<Check>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{} {:<22} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!("{} checks, {failed} failed\n", self.checks.len()));
        out
    }
}

fn tolerance_check(name: &str, err: Result<f64>, tol: f64) -> Check {
    match err {
        Ok(e) => Check { name: name.into(), passed: e <= tol, detail: format!("max error {e:.3e} (tolerance {tol:.0e})") },
        Err(e) => Check { name: name.into(), passed: false, detail: e.to_string() },
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Additive weights plus pairwise synergies; each synergy is split evenly.
fn pairwise_oracle(master: u64) -> Result<f64> {
    let n = 10;
    let mut rng = seed::rng(master, "selfcheck-oracle", 0);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if j > i { rng.random_range(-1.0..1.0) } else { 0.0 }).collect())
        .collect();
    let (w2, c2) = (w.clone(), c.clone());
    let game = FnGame::new(n, move |s: &[bool]| {
        let mut v = 0.0;
        for i in 0..n {
            if s[i] {
                v += w2[i];
                for j in i + 1..n {
                    if s[j] {
                        v += c2[i][j];
                    }
                }
            }
        }
        v
    });
    let oracle: Vec<f64> =
        (0..n).map(|i| w[i] + 0.5 * (0..n).map(|j| c[i][j] + c[j][i]).sum::<f64>()).collect();
    Ok(max_abs_diff(&shapley_values_exact(&game, 14)?, &oracle))
}

fn random_table_game(master: u64, n: usize) -> FnGame<impl Fn(&[bool]) -> f64 + Sync> {
    let mut rng = seed::rng(master, "selfcheck-table", n as u64);
    let table: Vec<f64> = (0..1usize << n).map(|_| rng.random::<f64>()).collect();
    FnGame::new(n, move |s: &[bool]| table[s.iter().enumerate().map(|(i, b)| (*b as usize) << i).sum::<usize>()])
}

fn efficiency_gap(game: &dyn Game, phi: &[f64]) -> Result<f64> {
    let n = game.players();
    let full = game.value(&vec![true; n])? - game.value(&vec![false; n])?;
    Ok((phi.iter().sum::<f64>() - full).abs())
}

pub fn run_selfcheck(opts: &SelfcheckOptions) -> SelfcheckReport {
    let master = opts.seed;
    let mut checks = Vec::new();

    checks.push(tolerance_check("shapley-oracle", pairwise_oracle(master), 1e-9));

    let table = random_table_game(master, 9);
    checks.push(tolerance_check(
        "shapley-efficiency",
        shapley_values_exact(&table, 14).and_then(|phi| efficiency_gap(&table, &phi)),
        1e-9,
    ));

    let interaction = FnGame::new(8, |s: &[bool]| {
        let x: Vec<f64> = s.iter().map(|b| *b as u8 as f64).collect();
        0.6 * x[0] * x[4] + 0.3 * x[1] - 0.4 * x[2] * x[6] * x[7] + 0.1 * x[3]
    });
    checks.push(tolerance_check(
        "kernel-vs-exact",
        (|| Ok(max_abs_diff(&kernel_shap_values(&interaction, 4096, master)?.0, &shapley_values_exact(&interaction, 14)?)))(),
        0.02,
    ));

    let task = generate(&SynthSpec { instances: 12, seed: master ^ 0x5eed, ..SynthSpec::default() });
    let task = match task {
        Ok(t) => t,
        Err(e) => {
            checks.push(Check { name: "synthetic-task".into(), passed: false, detail: e.to_string() });
            return SelfcheckReport { checks };
        }
    };
    let instances: Vec<Instance> = task.examples.iter().map(|e| e.instance.clone()).collect();
    let linear: ModelHandle = match LinearBowModel::new(task.models.linear.clone()) {
        Ok(m) => Arc::new(m),
        Err(e) => {
            checks.push(Check { name: "synthetic-task".into(), passed: false, detail: e.to_string() });
            return SelfcheckReport { checks };
        }
    };

    let kernel_gap = (|| {
        let mut worst: f64 = 0.0;
        for (i, x) in instances.iter().take(4).enumerate() {
            let game = CoalitionGame::new(linear.clone(), x)?;
            let kopts = KernelShapOptions {
                samples: 512,
                seed: seed::derive(master, "selfcheck-kernel", i as u64),
                order: RankOrder::Signed,
                corrupt_weights: opts.corrupt_kernel,
            };
            let set = kernel_shap(&game, &kopts)?;
            let mut phi = vec![0.0; x.len()];
            for e in &set.entries {
                phi[e.unit.tokens()[0]] = e.score;
            }
            worst = worst.max(efficiency_gap(&game, &phi)?);
        }
        Ok(worst)
    })();
    checks.push(tolerance_check("kernel-efficiency", kernel_gap, 1e-6));

    let ig_gap = (|| {
        let mut worst: f64 = 0.0;
        for x in instances.iter().take(4) {
            let target = linear.predict(&x.sequence())?.label;
            let r = integrated_gradients(linear.as_ref(), x, 64, target, RankOrder::Signed)?;
            worst = worst.max(r.completeness_gap.map_or(f64::INFINITY, f64::abs));
        }
        Ok(worst)
    })();
    checks.push(tolerance_check("ig-completeness", ig_gap, 1e-9));

    let probe: Vec<Instance> = instances.iter().take(6).cloned().collect();
    let attention: Option<ModelHandle> =
        ToyAttentionModel::new(task.models.attention.clone()).ok().map(|m| Arc::new(m) as ModelHandle);
    for (name, model) in [("conformance-linear", Some(linear.clone())), ("conformance-attention", attention)] {
        let Some(model) = model else {
            checks.push(Check { name: name.into(), passed: false, detail: "model did not load".into() });
            continue;
        };
        let transport = LoopbackTransport::new(model).shuffled(master).window(8);
        let report = check_conformance(Box::new(transport), &probe, master);
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        let detail = if failed.is_empty() {
            format!("{} protocol checks", report.checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        };
        checks.push(Check { name: name.into(), passed: report.passed(), detail });
    }

    checks.push(match trivial_model(&linear, &instances, master) {
        Ok((comp, suff, zero)) => Check {
            name: "trivial-model".into(),
            passed: comp == 0.0 && suff == 1.0 && zero,
            detail: format!("constant model: comp {comp}, suff {suff}, all Shapley values zero: {zero}"),
        },
        Err(e) => Check { name: "trivial-model".into(), passed: false, detail: e.to_string() },
    });

    SelfcheckReport { checks }
}

/// Budgets from the linear model's spans, perturbations scored on a constant
/// model: nothing can flip, everything is sufficient.
fn trivial_model(linear: &ModelHandle, instances: &[Instance], master: u64) -> Result<(f64, f64, bool)> {
    let constant: ModelHandle = Arc::new(ConstantModel::new(vec![0.3, 0.7], MASK)?);
    let mut pairs = Vec::new();
    let mut spans = Vec::new();
    let mut tokens = Vec::new();
    let mut zero = true;
    for (i, x) in instances.iter().enumerate() {
        let sopts = ShapleyOptions { seed: seed::derive(master, "selfcheck-pairs", i as u64), ..ShapleyOptions::default() };
        let ps = bivariate_shapley(&CoalitionGame::new(linear.clone(), x)?, &sopts)?;
        let lopts = LouvainOptions { resolution: 1.0, seed: seed::derive(master, "selfcheck-louvain", i as u64) };
        spans.push(louvain_spans(&ps.pairs, &ps.graph, &lopts, RankOrder::Signed)?);
        pairs.push(ps.pairs);
        let flat = exact_shapley(&CoalitionGame::new(constant.clone(), x)?, &sopts)?;
        zero &= flat.entries.iter().all(|e| e.score.abs() < 1e-12);
        tokens.push(exact_shapley(&CoalitionGame::new(linear.clone(), x)?, &sopts)?);
    }
    let spans = Explanations::new("bivariate-shapley", Kind::SpanIntEx, spans)?;
    let methods = vec![
        Explanations::new("shapley-exact", Kind::TokenEx, tokens)?,
        Explanations::new("bivariate-shapley", Kind::TokenIntEx, pairs)?,
        spans.clone(),
    ];
    let f = unified_faithfulness(constant.as_ref(), instances, &methods, &spans, &FaithfulnessOptions { k_max: 2, seed: master })?;
    let comp = f.methods.iter().map(|m| m.score.comp).chain([f.random.comp]).fold(0.0, f64::max);
    let suff = f.methods.iter().map(|m| m.score.suff).chain([f.random.suff]).fold(1.0, f64::min);
    Ok((comp, suff, zero))
}
