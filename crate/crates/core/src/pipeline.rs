//! The two stages of a run. `explain` writes one JSONL file of attribution
//! sets per (method, kind); `evaluate` reads them back and scores them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterModel;
use crate::agreement::{unified_agreement, AgreementOptions, Level};
use crate::attribution::{
    attention_interaction, attention_token, bivariate_shapley, exact_shapley, integrated_gradients, kernel_shap,
    louvain_spans, select_head, CoalitionGame, KernelShapOptions, LouvainOptions, PairScores, ShapleyOptions,
};
use crate::complexity::{dataset_complexity, ComplexityOptions};
use crate::config::{sha256_hex, ModelSpec, RunConfig};
use crate::dataset::{load_dataset, Example};
use crate::error::{Error, Result};
use crate::faithfulness::{unified_faithfulness, FaithfulnessOptions};
use crate::model::{
    AttentionMap, Capabilities, ConstantModel, LinearBowModel, LinearBowParams, Model, ModelHandle, Prediction,
    ToyAttentionModel, ToyAttentionParams,
};
use crate::report::{write_csvs, write_radar, AgreementBlock, Budget, DiagnosticReport, ResultRow, SCHEMA_VERSION};
use crate::seed;
use crate::simulatability::{unified_simulatability, SimulatabilityOptions};
use crate::types::{AttributionRecord, AttributionSet, Explanations, Instance, Kind};

pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";

/// File an explanation set is stored in, relative to the output directory.
pub fn attribution_file(method: &str, kind: Kind) -> String {
    format!("{method}.{kind}.jsonl")
}

/// Counts every input sequence sent to the wrapped model.
pub struct CountingModel {
    inner: ModelHandle,
    calls: AtomicU64,
}

impl CountingModel {
    pub fn new(inner: ModelHandle) -> Self {
        CountingModel { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Model for CountingModel {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn classes(&self) -> usize {
        self.inner.classes()
    }
    fn mask_token(&self) -> &str {
        self.inner.mask_token()
    }
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn thread_safe(&self) -> bool {
        self.inner.thread_safe()
    }
    fn max_len(&self) -> Option<usize> {
        self.inner.max_len()
    }
    fn predict(&self, tokens: &[String]) -> Result<Prediction> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(tokens)
    }
    fn predict_batch(&self, batch: &[Vec<String>]) -> Result<Vec<Prediction>> {
        self.calls.fetch_add(batch.len() as u64, Ordering::Relaxed);
        self.inner.predict_batch(batch)
    }
    fn grad_dot(&self, tokens: &[String], baseline: &[String], alpha: f64, target: usize) -> Result<Vec<f64>> {
        self.inner.grad_dot(tokens, baseline, alpha, target)
    }
    fn attention(&self, tokens: &[String]) -> Result<AttentionMap> {
        self.inner.attention(tokens)
    }
    fn logits(&self, tokens: &[String]) -> Result<Vec<f64>> {
        self.inner.logits(tokens)
    }
}

/// Parameters of a built-in model: either a models file holding both toy
/// models or the bare parameters of the one requested.
fn builtin_params<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read model_params {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let v = match v.get(key) {
        Some(inner) => inner.clone(),
        None => v,
    };
    serde_json::from_value(v).map_err(|e| Error::Config(format!("model_params {}: {e}", path.display())))
}

/// A built-in model by name; `linear` and `attention` read their parameters
/// from `params`.
pub fn builtin_model(name: &str, params: Option<&Path>) -> Result<ModelHandle> {
    let needs = || params.ok_or_else(|| Error::Config(format!("builtin:{name} needs model parameters")));
    Ok(match name {
        "linear" => Arc::new(LinearBowModel::new(builtin_params::<LinearBowParams>(needs()?, "linear")?)?),
        "attention" => Arc::new(ToyAttentionModel::new(builtin_params::<ToyAttentionParams>(needs()?, "attention")?)?),
        "constant" => Arc::new(ConstantModel::new(vec![0.5, 0.5], crate::synth::MASK)?),
        other => return Err(Error::Config(format!("unknown builtin model {other:?}"))),
    })
}

pub fn build_model(cfg: &RunConfig) -> Result<ModelHandle> {
    match cfg.model_spec()? {
        ModelSpec::Builtin(name) => builtin_model(&name, cfg.model_params.as_ref().map(|p| cfg.resolve(p)).as_deref()),
        ModelSpec::Adapter(endpoint) => Ok(Arc::new(AdapterModel::open(&endpoint, cfg.timeout(), cfg.window)?)),
    }
}

/// Capability a method needs beyond `predict`.
pub fn required_capability(method: &str) -> Option<&'static str> {
    match method {
        "ig" => Some("grad_dot"),
        "attention" => Some("attention"),
        _ => None,
    }
}

pub fn check_capabilities(model: &dyn Model, methods: &[String]) -> Result<()> {
    let caps = model.capabilities();
    for m in methods {
        match required_capability(m) {
            Some("grad_dot") if !caps.grad_dot => return Err(Error::UnsupportedCapability("grad_dot")),
            Some("attention") if !caps.attention => return Err(Error::UnsupportedCapability("attention")),
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

impl FileEntry {
    fn of(dir: &Path, name: &str) -> Result<Self> {
        Ok(FileEntry { path: name.to_string(), sha256: sha256_hex(&std::fs::read(dir.join(name))?) })
    }
}

/// Provenance of everything in an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub model_id: String,
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_head: Option<usize>,
    /// Model predictions issued per method while explaining.
    #[serde(default)]
    pub predictions: BTreeMap<String, u64>,
    #[serde(default)]
    pub explain: Vec<FileEntry>,
    #[serde(default)]
    pub evaluate: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn dataset_id(cfg: &RunConfig) -> String {
    cfg.dataset_path().file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn load_examples(cfg: &RunConfig) -> Result<Vec<Example>> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    load_dataset(&path)
}

struct MethodCtx<'a> {
    cfg: &'a RunConfig,
    model: ModelHandle,
    head: usize,
}

impl MethodCtx<'_> {
    fn spans(&self, pairs: PairScores, idx: usize) -> Result<[AttributionSet; 2]> {
        let opts = LouvainOptions {
            resolution: self.cfg.louvain_resolution,
            seed: seed::derive(self.cfg.seed, "louvain", idx as u64),
        };
        let spans = louvain_spans(&pairs.pairs, &pairs.graph, &opts, self.cfg.ranking)?;
        Ok([pairs.pairs, spans])
    }

    /// Sets of every kind `method` writes, in the method's kind order.
    fn run(&self, method: &str, x: &Instance, idx: usize) -> Result<Vec<AttributionSet>> {
        let cfg = self.cfg;
        let shapley = |tag: &str| ShapleyOptions {
            cap: cfg.shapley_cap,
            permutations: cfg.bivariate_permutations,
            seed: seed::derive(cfg.seed, tag, idx as u64),
            order: cfg.ranking,
        };
        let model = self.model.as_ref();
        let mut sets = match method {
            "shapley-exact" => {
                let game = CoalitionGame::new(self.model.clone(), x)?;
                vec![exact_shapley(&game, &shapley("shapley-exact"))?]
            }
            "kernel-shap" => {
                let game = CoalitionGame::new(self.model.clone(), x)?;
                let opts = KernelShapOptions {
                    samples: cfg.kernel_samples,
                    seed: seed::derive(cfg.seed, "kernel-shap", idx as u64),
                    order: cfg.ranking,
                    corrupt_weights: false,
                };
                vec![kernel_shap(&game, &opts)?]
            }
            "ig" => {
                let target = model.predict(&x.sequence())?.label;
                vec![integrated_gradients(model, x, cfg.ig_steps, target, cfg.ranking)?.set]
            }
            "bivariate-shapley" => {
                let game = CoalitionGame::new(self.model.clone(), x)?;
                self.spans(bivariate_shapley(&game, &shapley("bivariate-shapley"))?, idx)?.to_vec()
            }
            "attention" => {
                let token = attention_token(model, x, self.head, cfg.ranking)?;
                let [pairs, spans] = self.spans(attention_interaction(model, x, self.head, cfg.ranking)?, idx)?;
                vec![token, pairs, spans]
            }
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        };
        for s in &mut sets {
            s.method = method.to_string();
        }
        Ok(sets)
    }
}

fn choose_head(cfg: &RunConfig, model: &dyn Model, instances: &[Instance], log: &mut dyn Write) -> Result<usize> {
    if let Some(h) = cfg.attention_head {
        return Ok(h);
    }
    let first = instances.first().ok_or_else(|| Error::Config("empty dataset".into()))?;
    let heads = model.attention(&first.sequence())?.num_heads();
    let calibration = &instances[..cfg.head_calibration.clamp(1, instances.len())];
    let candidates: Vec<usize> = (0..heads).collect();
    let sel = select_head(model, calibration, &candidates, 1, seed::derive(cfg.seed, "select-head", 0))?;
    let _ = writeln!(log, "attention head {} (comprehensiveness by head: {:?})", sel.head, sel.scores);
    Ok(sel.head)
}

fn write_jsonl(path: &Path, sets: &[AttributionSet]) -> Result<()> {
    let mut out = String::new();
    for s in sets {
        out.push_str(&serde_json::to_string(&s.to_wire())?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Compute every requested explanation and write the attribution files.
pub fn explain(cfg: &RunConfig, log: &mut dyn Write) -> Result<Manifest> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let examples = load_examples(cfg)?;
    let instances: Vec<Instance> = examples.into_iter().map(|e| e.instance).collect();
    let counter = Arc::new(CountingModel::new(build_model(cfg)?));
    let model: ModelHandle = counter.clone();
    check_capabilities(model.as_ref(), &cfg.methods)?;
    let out = cfg.out_path();
    std::fs::create_dir_all(&out)?;

    let head = if cfg.methods.iter().any(|m| m == "attention") {
        Some(choose_head(cfg, model.as_ref(), &instances, log)?)
    } else {
        None
    };
    let ctx = MethodCtx { cfg, model: model.clone(), head: head.unwrap_or(0) };
    let mut manifest = Manifest {
        config_hash: hash,
        seed: cfg.seed,
        model_id: model.id().to_string(),
        dataset_id: dataset_id(cfg),
        attention_head: head,
        ..Manifest::default()
    };
    for method in &cfg.methods {
        let before = counter.calls();
        let run = |i: usize, x: &Instance| ctx.run(method, x, i);
        let results: Vec<Result<Vec<AttributionSet>>> = if model.thread_safe() {
            crate::par::map_indexed(&instances, run)
        } else {
            instances.iter().enumerate().map(|(i, x)| run(i, x)).collect()
        };
        let kinds = crate::config::method_kinds(method).expect("validated");
        let mut by_kind: Vec<Vec<AttributionSet>> = vec![Vec::with_capacity(instances.len()); kinds.len()];
        let mut warnings = 0;
        for r in results {
            for (slot, set) in by_kind.iter_mut().zip(r?) {
                warnings += set.warnings.len();
                slot.push(set);
            }
        }
        for (kind, sets) in kinds.iter().zip(&by_kind) {
            let name = attribution_file(method, *kind);
            write_jsonl(&out.join(&name), sets)?;
            manifest.explain.push(FileEntry::of(&out, &name)?);
        }
        let calls = counter.calls() - before;
        manifest.predictions.insert(method.clone(), calls);
        let _ = writeln!(
            log,
            "{method}: {} instances, {calls} predictions{}",
            instances.len(),
            if warnings > 0 { format!(", {warnings} warnings") } else { String::new() }
        );
    }
    manifest.save(&out)?;
    Ok(manifest)
}

/// Read one attribution file back, checking every set against its instance.
pub fn read_explanations(path: &Path, method: &str, kind: Kind, cfg: &RunConfig, by_id: &BTreeMap<&str, &Instance>) -> Result<Explanations> {
    let text = std::fs::read_to_string(path)?;
    let mut sets = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttributionRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: n + 1, message: format!("{}: {e}", path.display()) })?;
        let set = AttributionSet::from_wire(rec, cfg.ranking)?;
        if set.kind != kind || set.method != method {
            return Err(Error::validation(
                &set.instance_id,
                format!("{} holds a {}/{} set", path.display(), set.method, set.kind),
            ));
        }
        let inst = by_id
            .get(set.instance_id.as_str())
            .ok_or_else(|| Error::validation(&set.instance_id, "not in the dataset"))?;
        set.validate_for(inst)?;
        sets.push(set);
    }
    Explanations::new(method, kind, sets)
}

fn rows_from(report: &DiagnosticReport, cfg: &RunConfig) -> Vec<ResultRow> {
    let row = |method: &str, kind: Kind, property: &str, score, baseline, k, n| ResultRow {
        method: method.to_string(),
        kind,
        property: property.to_string(),
        score,
        baseline,
        budget: Budget { source: cfg.span_source.clone(), k },
        seed: cfg.seed,
        n_instances: n,
    };
    let mut rows = Vec::new();
    for (method, kind) in cfg.outputs() {
        if let Some(f) = &report.faithfulness {
            if let Some(m) = f.method(&method, kind) {
                rows.push(row(&method, kind, "comprehensiveness", m.score.comp, Some(f.random.comp), f.k_max, f.n_instances));
                rows.push(row(&method, kind, "sufficiency", m.score.suff, Some(f.random.suff), f.k_max, f.n_instances));
                rows.push(row(
                    &method,
                    kind,
                    "sufficiency_lower_better",
                    m.score.suff_lower_better(),
                    Some(f.random.suff_lower_better()),
                    f.k_max,
                    f.n_instances,
                ));
            }
        }
        if let Some(a) = &report.agreement {
            for (r, name) in [(&a.token, "agreement_token"), (&a.interaction, "agreement_interaction")] {
                if let Some(m) = r.as_ref().and_then(|r| r.method(&method, kind).map(|m| (r, m))) {
                    rows.push(row(&method, kind, name, m.1.map, Some(m.0.random), m.0.k_max, m.1.n_instances));
                }
            }
        }
        if let Some(s) = &report.simulatability {
            if let Some(m) = s.method(&method, kind) {
                let n = s.sizes.2;
                rows.push(row(&method, kind, "simulatability", m.rsf, None, s.k, n));
            }
        }
        if let Some(c) = &report.complexity {
            if let Some(m) = c.method(&method, kind) {
                rows.push(row(&method, kind, "complexity", m.cl, Some(c.random_ref), 1, c.n_instances));
            }
        }
    }
    rows
}

/// Score the attribution files of a finished `explain` run and write the
/// report, the CSV tables, the radar table and the trained agents.
pub fn evaluate(cfg: &RunConfig, log: &mut dyn Write) -> Result<DiagnosticReport> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let examples = load_examples(cfg)?;
    let instances: Vec<Instance> = examples.iter().map(|e| e.instance.clone()).collect();
    let out = cfg.out_path();

    let missing: Vec<String> = cfg
        .outputs()
        .iter()
        .map(|(m, k)| attribution_file(m, *k))
        .filter(|f| !out.join(f).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing attribution files in {}: {}; run explain with this config first",
            out.display(),
            missing.join(", ")
        )));
    }
    let by_id: BTreeMap<&str, &Instance> = instances.iter().map(|x| (x.id.as_str(), x)).collect();
    let mut all = Vec::new();
    for (m, k) in cfg.outputs() {
        all.push(read_explanations(&out.join(attribution_file(&m, k)), &m, k, cfg, &by_id)?);
    }
    let spans = all
        .iter()
        .find(|e| e.method == cfg.span_source && e.kind == Kind::SpanIntEx)
        .cloned()
        .expect("validated span source");

    let wants = |p: &str| cfg.properties.iter().any(|q| q == p);
    let needs_model = wants("faithfulness") || wants("simulatability");
    let model = if needs_model { Some(build_model(cfg)?) } else { None };
    let model_id = match (&model, Manifest::load(&out)?) {
        (Some(m), _) => m.id().to_string(),
        (None, Some(man)) => man.model_id,
        (None, None) => cfg.model.clone(),
    };
    let mut report = DiagnosticReport {
        schema_version: SCHEMA_VERSION,
        dataset_id: dataset_id(cfg),
        model_id,
        config_hash: hash.clone(),
        seed: cfg.seed,
        span_source: cfg.span_source.clone(),
        results: Vec::new(),
        faithfulness: None,
        agreement: None,
        simulatability: None,
        complexity: None,
        notes: Vec::new(),
    };

    for property in &cfg.properties {
        match property.as_str() {
            "faithfulness" => {
                let opts = FaithfulnessOptions { k_max: cfg.k_faith, seed: cfg.seed };
                let f = unified_faithfulness(model.as_deref().unwrap(), &instances, &all, &spans, &opts)?;
                let _ = writeln!(log, "faithfulness: {} instances, {} skipped", f.n_instances, f.skipped.len());
                report.faithfulness = Some(f);
            }
            "agreement" => {
                if examples.iter().all(|e| e.gold.is_none()) {
                    report.notes.push("agreement skipped: the dataset has no gold annotations".into());
                    continue;
                }
                let opts = AgreementOptions { k_max: cfg.k_faith, seed: cfg.seed, matcher: cfg.matcher()? };
                let mut block = AgreementBlock::default();
                match unified_agreement(&examples, &all, &spans, Level::Token, &opts) {
                    Ok(r) => block.token = Some(r),
                    Err(Error::EmptyEvaluation) => report.notes.push("no instance has token-level gold".into()),
                    Err(e) => return Err(e),
                }
                let interaction: Vec<Explanations> = all.iter().filter(|e| e.kind != Kind::TokenEx).cloned().collect();
                if !interaction.is_empty() {
                    match unified_agreement(&examples, &interaction, &spans, Level::Interaction, &opts) {
                        Ok(r) => block.interaction = Some(r),
                        Err(Error::EmptyEvaluation) => {
                            report.notes.push("no instance has interaction-level gold".into())
                        }
                        Err(e) => return Err(e),
                    }
                }
                let _ = writeln!(log, "agreement: matcher {}", cfg.matcher);
                report.agreement = Some(block);
            }
            "simulatability" => {
                let opts = SimulatabilityOptions {
                    insertion: cfg.insertion()?,
                    k: cfg.k_sim,
                    hyper: cfg.agent_hyper(),
                    seed: cfg.seed,
                    ..SimulatabilityOptions::default()
                };
                let s = unified_simulatability(model.as_deref().unwrap(), &instances, &all, &spans, &opts)?;
                let _ = writeln!(log, "simulatability: SF_O {:.4}", s.sf_o);
                report.simulatability = Some(s);
            }
            "complexity" => {
                let opts = ComplexityOptions { seed: cfg.seed, form: cfg.complexity_form };
                let c = dataset_complexity(&instances, &all, &spans, &opts)?;
                let _ = writeln!(log, "complexity: {} instances", c.n_instances);
                report.complexity = Some(c);
            }
            other => return Err(Error::Config(format!("unknown property {other:?}"))),
        }
    }
    report.results = rows_from(&report, cfg);
    report.check_ranges()?;

    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(REPORT), report.to_json())?;
    let mut files = vec![REPORT.to_string()];
    files.extend(write_csvs(&report, &out)?);
    write_radar(&report, &out.join("radar.csv"))?;
    files.push("radar.csv".into());
    files.extend(write_agents(&report, &out)?);

    let mut manifest = Manifest::load(&out)?.unwrap_or_default();
    manifest.config_hash = hash;
    manifest.seed = cfg.seed;
    manifest.model_id = report.model_id.clone();
    manifest.dataset_id = report.dataset_id.clone();
    manifest.evaluate = files.iter().map(|f| FileEntry::of(&out, f)).collect::<Result<_>>()?;
    manifest.save(&out)?;
    Ok(report)
}

fn write_agents(report: &DiagnosticReport, out: &Path) -> Result<Vec<String>> {
    let Some(s) = &report.simulatability else { return Ok(Vec::new()) };
    let dir = out.join("agents");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut save = |name: String, params: &LinearBowParams| -> Result<()> {
        let rel = PathBuf::from("agents").join(&name);
        let doc = serde_json::json!({ "config_hash": report.config_hash, "seed": report.seed, "agent": params });
        std::fs::write(out.join(&rel), serde_json::to_string(&doc)? + "\n")?;
        files.push(rel.to_string_lossy().into_owned());
        Ok(())
    };
    save("none.json".into(), &s.baseline_agent)?;
    let mut seen = BTreeSet::new();
    for m in &s.methods {
        let name = format!("{}.{}.json", m.method, m.kind);
        if seen.insert(name.clone()) {
            save(name, &m.agent)?;
        }
    }
    Ok(files)
}

/// Run `f` with `jobs` worker threads (0 keeps the global pool).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    #[cfg(feature = "parallel")]
    {
        if jobs > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            return Ok(pool.install(f));
        }
    }
    let _ = jobs;
    Ok(f())
}
