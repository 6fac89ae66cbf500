//! Deterministic JSON/CSV report output.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_NAME: &str = "chair-eval";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Where a report came from: tool version, vocabulary hash, inputs, settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub synonym_table_hash: String,
    pub inputs: BTreeMap<String, InputDigest>,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(synonym_table_hash: &str) -> Self {
        Provenance {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            synonym_table_hash: synonym_table_hash.into(),
            inputs: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    /// Records the SHA-256 of an input file under `role`.
    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(
            role.into(),
            InputDigest {
                path: path.display().to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file_name: String,
    pub header: Vec<String>,
    /// Leading columns forming the primary key used for row order.
    pub key_columns: usize,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file_name: &str, header: &[&str], key_columns: usize) -> Self {
        Table {
            file_name: file_name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            key_columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub json_name: String,
    pub provenance: Provenance,
    pub body: serde_json::Value,
    pub tables: Vec<Table>,
}

/// Numbers compare numerically, everything else as text.
fn compare_cell(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

fn compare_rows(a: &[String], b: &[String], keys: usize) -> Ordering {
    a.iter()
        .zip(b)
        .take(keys)
        .map(|(x, y)| compare_cell(x, y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Renders a float cell; missing values become an empty cell.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the JSON document and/or the CSV tables into `out_dir`.
pub fn emit_report(report: &Report, out_dir: &Path, formats: &BTreeSet<ReportFormat>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Json) {
        // serde_json::Value maps are ordered, so keys come out sorted.
        let mut doc = serde_json::to_value(&report.body)
            .map_err(|e| Error::InvalidArgument(format!("unserializable report: {e}")))?;
        let prov = serde_json::to_value(&report.provenance)
            .map_err(|e| Error::InvalidArgument(format!("unserializable provenance: {e}")))?;
        match &mut doc {
            serde_json::Value::Object(map) => {
                map.insert("provenance".into(), prov);
            }
            other => {
                let body = std::mem::take(other);
                *other = serde_json::json!({ "report": body, "provenance": prov });
            }
        }
        let mut text = serde_json::to_string_pretty(&doc).expect("value serializes");
        text.push('\n');
        let path = out_dir.join(&report.json_name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Csv) {
        for table in &report.tables {
            let path = out_dir.join(&table.file_name);
            let mut rows: Vec<&Vec<String>> = table.rows.iter().collect();
            rows.sort_by(|a, b| compare_rows(a, b, table.key_columns));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, &e))?;
            w.write_record(&table.header).map_err(|e| Error::csv(&path, &e))?;
            for row in rows {
                w.write_record(row).map_err(|e| Error::csv(&path, &e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
