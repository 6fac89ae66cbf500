//! Delimited-text reading shared by the vocabulary, probability and score loaders.
//!
//! Rows are tab-separated; a file whose first data row has no tab is read as
//! comma-separated instead. Blank lines and lines starting with `#` are skipped.

use std::path::Path;

use crate::error::{Error, Result};

/// One data row with its 1-based line number in the source.
#[derive(Debug, Clone)]
pub(crate) struct Row {
    pub line: usize,
    pub fields: Vec<String>,
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(path, &text)
}

pub(crate) fn parse(label: &Path, text: &str) -> Result<Vec<Row>> {
    let delimiter = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| if l.contains('\t') { b'\t' } else { b',' })
        .unwrap_or(b'\t');
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(label, &e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(str::is_empty) {
            continue;
        }
        rows.push(Row {
            line,
            fields: record.iter().map(str::to_owned).collect(),
        });
    }
    Ok(rows)
}

impl Row {
    /// Returns `Err` naming the line when the row has fewer than `n` fields.
    pub(crate) fn expect_fields(&self, label: &Path, n: usize) -> Result<()> {
        if self.fields.len() < n {
            return Err(Error::Parse {
                path: label.to_path_buf(),
                line: self.line,
                column: 0,
                message: format!("expected {n} fields, found {}", self.fields.len()),
            });
        }
        Ok(())
    }

    pub(crate) fn error(&self, label: &Path, message: impl Into<String>) -> Error {
        Error::Parse {
            path: label.to_path_buf(),
            line: self.line,
            column: 0,
            message: message.into(),
        }
    }
}
