//! The diagnostic report and its flat CSV and radar renderings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agreement::AgreementReport;
use crate::complexity::ComplexityReport;
use crate::error::{Error, Result};
use crate::faithfulness::FaithfulnessReport;
use crate::simulatability::SimulatabilityReport;
use crate::types::Kind;

pub const SCHEMA_VERSION: u32 = 1;

/// The JSON schema `report.json` conforms to.
pub const REPORT_SCHEMA: &str = include_str!("../../../schema/report.schema.json");

/// How the token budget of a row was set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Method whose span pairs fix the budgets.
    pub source: String,
    /// Largest span step averaged over.
    pub k: usize,
}

/// One (method, kind, property) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub kind: Kind,
    pub property: String,
    pub score: f64,
    pub baseline: Option<f64>,
    pub budget: Budget,
    pub seed: u64,
    pub n_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct AgreementBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<AgreementReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interaction: Option<AgreementReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub schema_version: u32,
    pub dataset_id: String,
    pub model_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub span_source: String,
    pub results: Vec<ResultRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faithfulness: Option<FaithfulnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulatability: Option<SimulatabilityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complexity: Option<ComplexityReport>,
    pub notes: Vec<String>,
}

/// The part of a saved report needed to print it again.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub dataset_id: String,
    pub model_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub span_source: String,
    pub results: Vec<ResultRow>,
    pub notes: Vec<String>,
}

impl ReportSummary {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        let summary: ReportSummary = serde_json::from_str(&text)?;
        if summary.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema version {} is not {SCHEMA_VERSION}",
                summary.schema_version
            )));
        }
        Ok(summary)
    }

    /// Fixed-width table of every row.
    pub fn render(&self) -> String {
        let mut out = format!(
            "dataset {}  model {}  seed {}  spans from {}\nconfig {}\n\n",
            self.dataset_id, self.model_id, self.seed, self.span_source, self.config_hash
        );
        out.push_str(&format!(
            "{:<20} {:<11} {:<26} {:>9} {:>9} {:>6}\n",
            "method", "kind", "property", "score", "baseline", "n"
        ));
        for r in &self.results {
            let base = r.baseline.map_or("-".to_string(), |b| format!("{b:.4}"));
            out.push_str(&format!(
                "{:<20} {:<11} {:<26} {:>9.4} {:>9} {:>6}\n",
                r.method,
                r.kind.as_str(),
                r.property,
                r.score,
                base,
                r.n_instances
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

/// Allowed range of each property's score.
pub fn property_range(property: &str) -> (f64, f64) {
    match property {
        "simulatability" => (-1.0, 1.0),
        "complexity" => (0.0, f64::INFINITY),
        _ => (0.0, 1.0),
    }
}

impl DiagnosticReport {
    pub fn row(&self, method: &str, kind: Kind, property: &str) -> Option<&ResultRow> {
        self.results.iter().find(|r| r.method == method && r.kind == kind && r.property == property)
    }

    /// Every score and baseline inside its property's range.
    pub fn check_ranges(&self) -> Result<()> {
        for r in &self.results {
            let (lo, hi) = property_range(&r.property);
            for v in std::iter::once(r.score).chain(r.baseline) {
                if !(v.is_finite() && v >= lo - 1e-12 && v <= hi + 1e-12) {
                    return Err(Error::Contract(format!(
                        "{}/{} {} = {v} outside [{lo}, {hi}]",
                        r.method, r.kind, r.property
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Write the per-property CSV files present in the report into `dir`;
/// returns the file names written.
pub fn write_csvs(report: &DiagnosticReport, dir: &Path) -> Result<Vec<String>> {
    let hash = &report.config_hash;
    let mut written = Vec::new();
    if let Some(f) = &report.faithfulness {
        let mut rows = Vec::new();
        for m in &f.methods {
            for (property, score, base) in [
                ("comprehensiveness", m.score.comp, f.random.comp),
                ("sufficiency", m.score.suff, f.random.suff),
                ("sufficiency_lower_better", m.score.suff_lower_better(), f.random.suff_lower_better()),
            ] {
                rows.push(vec![
                    m.method.clone(),
                    m.kind.to_string(),
                    property.into(),
                    f.k_max.to_string(),
                    score.to_string(),
                    base.to_string(),
                    f.n_instances.to_string(),
                    f.seed.to_string(),
                    hash.clone(),
                ]);
            }
        }
        let header = ["method", "kind", "property", "k_max", "score", "baseline", "n_instances", "seed", "config_hash"];
        write_csv(&dir.join("faithfulness.csv"), &header, rows)?;
        written.push("faithfulness.csv".into());
    }
    if let Some(a) = &report.agreement {
        let mut rows = Vec::new();
        for r in a.token.iter().chain(&a.interaction) {
            for m in &r.methods {
                rows.push(vec![
                    m.method.clone(),
                    m.kind.to_string(),
                    r.level.as_str().into(),
                    r.matcher.as_str().into(),
                    m.map.to_string(),
                    r.random.to_string(),
                    m.n_instances.to_string(),
                    r.seed.to_string(),
                    hash.clone(),
                ]);
            }
        }
        let header = ["method", "kind", "level", "matcher", "MAP", "baseline", "n_instances", "seed", "config_hash"];
        write_csv(&dir.join("agreement.csv"), &header, rows)?;
        written.push("agreement.csv".into());
    }
    if let Some(s) = &report.simulatability {
        let rows = s
            .methods
            .iter()
            .map(|m| {
                vec![
                    m.method.clone(),
                    m.kind.to_string(),
                    s.insertion.as_str().into(),
                    m.sf.to_string(),
                    s.sf_o.to_string(),
                    m.rsf.to_string(),
                    s.k.to_string(),
                    s.seed.to_string(),
                    hash.clone(),
                ]
            })
            .collect();
        let header = ["method", "kind", "insertion", "SF", "SF_O", "RSF", "k", "seed", "config_hash"];
        write_csv(&dir.join("simulatability.csv"), &header, rows)?;
        written.push("simulatability.csv".into());
    }
    if let Some(c) = &report.complexity {
        let rows = c
            .methods
            .iter()
            .map(|m| {
                vec![
                    m.method.clone(),
                    m.kind.to_string(),
                    m.cl.to_string(),
                    c.random_ref.to_string(),
                    c.upper_bound.to_string(),
                    c.n_instances.to_string(),
                    c.seed.to_string(),
                    hash.clone(),
                ]
            })
            .collect();
        let header = ["method", "kind", "CL", "random_ref", "upper_bound", "n_instances", "seed", "config_hash"];
        write_csv(&dir.join("complexity.csv"), &header, rows)?;
        written.push("complexity.csv".into());
    }
    Ok(written)
}

/// One radar axis per property, every value mapped to `[0, 1]` with higher
/// meaning better.
pub fn radar_rows(report: &DiagnosticReport) -> Vec<(String, Kind, &'static str, f64)> {
    let upper = report.complexity.as_ref().map_or(0.0, |c| c.upper_bound);
    let mut out = Vec::new();
    for r in &report.results {
        let (axis, value) = match r.property.as_str() {
            "comprehensiveness" => ("comprehensiveness", r.score),
            "sufficiency" => ("sufficiency", r.score),
            "agreement_token" => ("agreement", r.score),
            "simulatability" => ("simulatability", (r.score + 1.0) / 2.0),
            "complexity" if upper > 0.0 => ("conciseness", (1.0 - r.score / upper).clamp(0.0, 1.0)),
            "complexity" => ("conciseness", 1.0),
            _ => continue,
        };
        out.push((r.method.clone(), r.kind, axis, value));
    }
    out
}

pub fn write_radar(report: &DiagnosticReport, path: &Path) -> Result<()> {
    let rows = radar_rows(report)
        .into_iter()
        .map(|(m, k, axis, v)| {
            vec![m, k.to_string(), axis.to_string(), v.to_string(), report.seed.to_string(), report.config_hash.clone()]
        })
        .collect();
    write_csv(path, &["method", "kind", "axis", "value", "seed", "config_hash"], rows)
}
