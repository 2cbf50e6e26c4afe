//! JSONL dataset ingestion and serialization.
//!
//! One record per line:
//! `{"id", "part1", "part2", "label", "token_gold"?, "pair_gold"?, "span_gold"?}`
//! where a `span_gold` entry is `[s, s+l1, t, t+l2]` with inclusive endpoints.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{GoldAnnotation, Instance, Unit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub part1: Vec<String>,
    pub part2: Vec<String>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_gold: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_gold: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_gold: Option<Vec<[usize; 4]>>,
}

/// An instance together with its optional gold annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub instance: Instance,
    pub gold: Option<GoldAnnotation>,
}

impl DatasetRecord {
    pub fn into_example(self) -> Result<Example> {
        let instance = Instance::new(self.id, self.part1, self.part2, self.label)?;
        let id = instance.id.clone();
        let gold = GoldAnnotation {
            instance_id: id.clone(),
            token_gold: self.token_gold.map(|v| v.into_iter().collect()),
            pair_gold: self
                .pair_gold
                .map(|v| v.into_iter().map(|[p, q]| Unit::TokenPair(p, q)).collect()),
            span_gold: self.span_gold.map(|v| {
                v.into_iter().map(|[s, se, t, te]| Unit::SpanPair((s, se), (t, te))).collect()
            }),
        };
        gold.validate_for(&instance)?;
        let gold = (!gold.is_empty()).then_some(gold);
        Ok(Example { instance, gold })
    }

    pub fn from_example(ex: &Example) -> Self {
        let inst = &ex.instance;
        let gold = ex.gold.as_ref();
        let encode = |set: &BTreeSet<Unit>| set.iter().map(Unit::encode).collect::<Vec<_>>();
        DatasetRecord {
            id: inst.id.clone(),
            part1: inst.part1.clone(),
            part2: inst.part2.clone(),
            label: inst.label,
            token_gold: gold.and_then(|g| g.token_gold.as_ref()).map(|t| t.iter().copied().collect()),
            pair_gold: gold
                .and_then(|g| g.pair_gold.as_ref())
                .map(|p| encode(p).into_iter().map(|v| [v[0], v[1]]).collect()),
            span_gold: gold
                .and_then(|g| g.span_gold.as_ref())
                .map(|s| encode(s).into_iter().map(|v| [v[0], v[1], v[2], v[3]]).collect()),
        }
    }
}

/// Parse a dataset from any line reader, validating every record.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<Example>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Conflict(record.id));
        }
        out.push(record.into_example()?);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let file = fs::File::open(path)?;
    read_dataset(BufReader::new(file))
}

pub fn write_dataset<W: Write>(mut writer: W, examples: &[Example]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut writer, &DatasetRecord::from_example(ex))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, examples)?;
    fs::write(path, buf)?;
    Ok(())
}
