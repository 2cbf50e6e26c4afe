//! Run configuration: one flat TOML file, overridable key by key.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::Endpoint;
use crate::agreement::Matcher;
use crate::complexity::ComplexityForm;
use crate::error::{Error, Result};
use crate::simulatability::{AgentHyper, Insertion};
use crate::types::{Kind, RankOrder};

/// Attribution methods and the explanation kinds each one writes.
pub const METHODS: [(&str, &[Kind]); 5] = [
    ("shapley-exact", &[Kind::TokenEx]),
    ("kernel-shap", &[Kind::TokenEx]),
    ("ig", &[Kind::TokenEx]),
    ("bivariate-shapley", &[Kind::TokenIntEx, Kind::SpanIntEx]),
    ("attention", &[Kind::TokenEx, Kind::TokenIntEx, Kind::SpanIntEx]),
];

pub const PROPERTIES: [&str; 4] = ["faithfulness", "agreement", "simulatability", "complexity"];

pub fn method_kinds(method: &str) -> Option<&'static [Kind]> {
    METHODS.iter().find(|(m, _)| *m == method).map(|(_, k)| *k)
}

fn default_methods() -> Vec<String> {
    vec!["shapley-exact".into(), "bivariate-shapley".into()]
}
fn default_properties() -> Vec<String> {
    PROPERTIES.iter().map(|p| p.to_string()).collect()
}
fn default_span_source() -> String {
    "bivariate-shapley".into()
}
fn default_k_faith() -> usize {
    crate::faithfulness::DEFAULT_K
}
fn default_one() -> usize {
    1
}
fn default_matcher() -> String {
    "exact".into()
}
fn default_insertion() -> String {
    "symbol".into()
}
fn default_cap() -> usize {
    crate::attribution::DEFAULT_EXACT_CAP
}
fn default_permutations() -> usize {
    2000
}
fn default_samples() -> usize {
    4096
}
fn default_ig_steps() -> usize {
    200
}
fn default_calibration() -> usize {
    64
}
fn default_resolution() -> f64 {
    1.0
}
fn default_agent_lr() -> f64 {
    AgentHyper::default().lr
}
fn default_agent_l2() -> f64 {
    AgentHyper::default().l2
}
fn default_agent_epochs() -> usize {
    AgentHyper::default().epochs
}
fn default_agent_batch() -> usize {
    AgentHyper::default().batch
}
fn default_agent_patience() -> usize {
    AgentHyper::default().patience
}
fn default_timeout() -> u64 {
    30
}
fn default_window() -> usize {
    crate::adapter::DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `builtin:<linear|attention|constant>`, `adapter:stdio:<cmd>` or
    /// `adapter:http:<url>`.
    pub model: String,
    /// Models JSON holding the parameters of a built-in model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_params: Option<PathBuf>,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_properties")]
    pub properties: Vec<String>,
    /// Method whose span pairs set every token budget.
    #[serde(default = "default_span_source")]
    pub span_source: String,
    #[serde(default = "default_k_faith")]
    pub k_faith: usize,
    #[serde(default = "default_one")]
    pub k_sim: usize,
    #[serde(default)]
    pub ranking: RankOrder,
    #[serde(default = "default_matcher")]
    pub matcher: String,
    #[serde(default = "default_insertion")]
    pub insertion: String,
    #[serde(default)]
    pub complexity_form: ComplexityForm,
    #[serde(default = "default_cap")]
    pub shapley_cap: usize,
    #[serde(default = "default_permutations")]
    pub bivariate_permutations: usize,
    #[serde(default = "default_samples")]
    pub kernel_samples: usize,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    /// Fixed attention head; chosen on a calibration subset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_head: Option<usize>,
    #[serde(default = "default_calibration")]
    pub head_calibration: usize,
    #[serde(default = "default_resolution")]
    pub louvain_resolution: f64,
    #[serde(default = "default_agent_lr")]
    pub agent_lr: f64,
    #[serde(default = "default_agent_l2")]
    pub agent_l2: f64,
    #[serde(default = "default_agent_epochs")]
    pub agent_epochs: usize,
    #[serde(default = "default_agent_batch")]
    pub agent_batch: usize,
    #[serde(default = "default_agent_patience")]
    pub agent_patience: usize,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Builtin(String),
    Adapter(Endpoint),
}

pub const BUILTIN_MODELS: [&str; 3] = ["linear", "attention", "constant"];

impl ModelSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("builtin:") {
            if !BUILTIN_MODELS.contains(&name) {
                return Err(Error::Config(format!("unknown built-in model {name:?}; one of {BUILTIN_MODELS:?}")));
            }
            return Ok(ModelSpec::Builtin(name.into()));
        }
        if let Some(rest) = s.strip_prefix("adapter:") {
            return Ok(ModelSpec::Adapter(Endpoint::parse(rest)?));
        }
        Err(Error::Config(format!("model {s:?} must start with builtin: or adapter:")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Read a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Override one key with a TOML value; bare words are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let mut next: RunConfig =
            table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("--set {key}: {e}")))?;
        next.base_dir = self.base_dir.clone();
        *self = next;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn out_path(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::parse(&self.model)
    }

    pub fn matcher(&self) -> Result<Matcher> {
        Matcher::parse(&self.matcher).ok_or_else(|| Error::Config(format!("unknown matcher {:?}", self.matcher)))
    }

    pub fn insertion(&self) -> Result<Insertion> {
        Insertion::parse(&self.insertion).ok_or_else(|| Error::Config(format!("unknown insertion {:?}", self.insertion)))
    }

    pub fn agent_hyper(&self) -> AgentHyper {
        AgentHyper {
            lr: self.agent_lr,
            l2: self.agent_l2,
            epochs: self.agent_epochs,
            batch: self.agent_batch,
            patience: self.agent_patience,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    /// Every (method, kind) pair the run produces.
    pub fn outputs(&self) -> Vec<(String, Kind)> {
        self.methods
            .iter()
            .flat_map(|m| method_kinds(m).unwrap_or(&[]).iter().map(move |k| (m.clone(), *k)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let spec = self.model_spec()?;
        if let ModelSpec::Builtin(name) = &spec {
            if name != "constant" && self.model_params.is_none() {
                return bad(format!("builtin:{name} needs model_params"));
            }
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        for m in &self.methods {
            if method_kinds(m).is_none() {
                let names: Vec<&str> = METHODS.iter().map(|(n, _)| *n).collect();
                return bad(format!("unknown method {m:?}; one of {names:?}"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.methods.iter().find(|m| !seen.insert(m.as_str())) {
            return bad(format!("method {dup:?} listed twice"));
        }
        for p in &self.properties {
            if !PROPERTIES.contains(&p.as_str()) {
                return bad(format!("unknown property {p:?}; one of {PROPERTIES:?}"));
            }
        }
        if !self.methods.contains(&self.span_source) {
            return bad(format!("span_source {:?} is not among the methods", self.span_source));
        }
        if !method_kinds(&self.span_source).unwrap_or(&[]).contains(&Kind::SpanIntEx) {
            return bad(format!("span_source {:?} produces no span pairs", self.span_source));
        }
        if self.k_faith == 0 || self.k_sim == 0 {
            return bad("k_faith and k_sim start at 1".into());
        }
        if self.ig_steps == 0 || self.kernel_samples == 0 || self.bivariate_permutations == 0 {
            return bad("ig_steps, kernel_samples and bivariate_permutations must be positive".into());
        }
        if self.agent_batch == 0 || self.agent_epochs == 0 {
            return bad("agent_batch and agent_epochs must be positive".into());
        }
        if !(self.louvain_resolution > 0.0 && self.louvain_resolution.is_finite()) {
            return bad(format!("louvain_resolution {} must be positive", self.louvain_resolution));
        }
        self.matcher()?;
        self.insertion()?;
        Ok(())
    }

    /// Digest of everything that determines the run's outputs: the settings
    /// (without output location and transport tuning) and the bytes of the
    /// dataset and model parameter files.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.jobs = 0;
        canonical.timeout_secs = 0;
        canonical.window = 0;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical)?);
        let read = |p: PathBuf| std::fs::read(&p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())));
        h.update(Sha256::digest(read(self.dataset_path())?));
        if let Some(p) = &self.model_params {
            h.update(Sha256::digest(read(self.resolve(p))?));
        }
        Ok(hex(&h.finalize()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "model = \"builtin:constant\"\ndataset = \"d.jsonl\"\nout_dir = \"out\"\nseed = 7\n";

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.k_faith, 3);
        assert_eq!(c.k_sim, 1);
        assert_eq!(c.properties.len(), 4);
        assert_eq!(c.span_source, "bivariate-shapley");
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_toml("model = \"builtin:constant\"\ndataset = \"d\"\nout_dir = \"o\"\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_and_names_are_config_errors() {
        assert!(RunConfig::from_toml(&format!("{MINIMAL}colour = 1\n")).is_err());
        for (key, value) in [
            ("methods", "[\"lime\"]"),
            ("properties", "[\"beauty\"]"),
            ("span_source", "\"shapley-exact\""),
            ("model", "\"builtin:bert\""),
            ("model", "\"adapter:tcp:x\""),
            ("k_faith", "0"),
            ("matcher", "\"fuzzy\""),
        ] {
            let mut c = RunConfig::from_toml(MINIMAL).unwrap();
            c.set(key, value).unwrap();
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{key}={value}");
        }
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.set("model", "builtin:linear").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.set("seed", "11").unwrap();
        c.set("methods", "[\"attention\", \"ig\"]").unwrap();
        c.set("out_dir", "elsewhere").unwrap();
        c.set("agent_epochs", "3").unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.methods, vec!["attention", "ig"]);
        assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.agent_hyper().epochs, 3);
        assert!(c.set("seed", "\"x\"").is_err());
    }

    #[test]
    fn hash_ignores_output_location_but_not_settings() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("d.jsonl"), "{}\n").unwrap();
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.base_dir = dir.path().to_path_buf();
        let h = c.hash().unwrap();
        c.set("out_dir", "other").unwrap();
        c.set("jobs", "3").unwrap();
        assert_eq!(c.hash().unwrap(), h);
        c.set("seed", "8").unwrap();
        assert_ne!(c.hash().unwrap(), h);
        std::fs::write(dir.path().join("d.jsonl"), "{} \n").unwrap();
        c.set("seed", "7").unwrap();
        assert_ne!(c.hash().unwrap(), h);
    }

    #[test]
    fn outputs_follow_methods() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.set("methods", "[\"attention\", \"ig\"]").unwrap();
        let out: Vec<String> = c.outputs().iter().map(|(m, k)| format!("{m}.{k}")).collect();
        assert_eq!(out, ["attention.TokenEx", "attention.TokenIntEx", "attention.SpanIntEx", "ig.TokenEx"]);
    }
}
