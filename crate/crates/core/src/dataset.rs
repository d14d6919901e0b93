//! Tabular domain data whose columns bind to template variables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::PromptDocument;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("empty input")]
    EmptyInput,
    #[error("row {0} does not match the header")]
    RaggedRow(usize),
    #[error("duplicate column {0}")]
    DuplicateColumn(String),
    #[error("malformed input: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataItem {
    pub item_id: String,
    pub fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub dataset_id: String,
    pub name: String,
    pub columns: Vec<String>,
    pub items: Vec<DataItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    /// A JSON array of flat objects with string values.
    Records,
}

/// Content-derived id, so importing identical input twice yields the same
/// dataset.
fn dataset_id(name: &str, columns: &[String], rows: &[Vec<String>]) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for c in columns {
        h.update([0x1f]);
        h.update(c.as_bytes());
    }
    for row in rows {
        h.update([0x1e]);
        for v in row {
            h.update([0x1f]);
            h.update(v.as_bytes());
        }
    }
    format!("ds-{}", &hex::encode(h.finalize())[..12])
}

fn build(name: &str, columns: Vec<String>, rows: Vec<Vec<String>>) -> Result<Dataset, DatasetError> {
    let mut seen = std::collections::BTreeSet::new();
    for c in &columns {
        if !seen.insert(c.as_str()) {
            return Err(DatasetError::DuplicateColumn(c.clone()));
        }
    }
    let id = dataset_id(name, &columns, &rows);
    let items = rows
        .into_iter()
        .enumerate()
        .map(|(i, row)| DataItem {
            item_id: format!("{id}-{:05}", i + 1),
            fields: columns.iter().cloned().zip(row).collect(),
        })
        .collect();
    Ok(Dataset {
        dataset_id: id,
        name: name.to_string(),
        columns,
        items,
    })
}

/// Parses CSV with a header row: comma separated, double-quote escaping,
/// UTF-8. Row numbers in errors count data rows from 1.
pub fn import_csv(raw: &str, name: &str) -> Result<Dataset, DatasetError> {
    if raw.trim().is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(raw.as_bytes());
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::Malformed(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DatasetError::Malformed(e.to_string()))?;
        if record.len() != columns.len() {
            return Err(DatasetError::RaggedRow(i + 1));
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    build(name, columns, rows)
}

/// Parses a JSON array of flat string-valued objects. Columns follow the key
/// order of the first record.
pub fn import_records(raw: &str, name: &str) -> Result<Dataset, DatasetError> {
    if raw.trim().is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let records: Vec<serde_json::Map<String, serde_json::Value>> =
        serde_json::from_str(raw).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    let Some(first) = records.first() else {
        return Err(DatasetError::EmptyInput);
    };
    let columns: Vec<String> = first.keys().cloned().collect();
    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != columns.len() || !columns.iter().all(|c| rec.contains_key(c)) {
            return Err(DatasetError::RaggedRow(i + 1));
        }
        let mut row = Vec::with_capacity(columns.len());
        for c in &columns {
            match &rec[c] {
                serde_json::Value::String(s) => row.push(s.clone()),
                other => {
                    return Err(DatasetError::Malformed(format!(
                        "record {} field {c}: expected string, got {other}",
                        i + 1
                    )))
                }
            }
        }
        rows.push(row);
    }
    build(name, columns, rows)
}

pub fn import_table(raw: &str, name: &str, format: TableFormat) -> Result<Dataset, DatasetError> {
    match format {
        TableFormat::Csv => import_csv(raw, name),
        TableFormat::Records => import_records(raw, name),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingReport {
    pub missing: Vec<String>,
    pub unused_columns: Vec<String>,
}

impl BindingReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty()
    }
}

pub fn validate_variables(dataset: &Dataset, variables: &[String]) -> BindingReport {
    BindingReport {
        missing: variables
            .iter()
            .filter(|v| !dataset.columns.contains(v))
            .cloned()
            .collect(),
        unused_columns: dataset
            .columns
            .iter()
            .filter(|c| !variables.contains(c))
            .cloned()
            .collect(),
    }
}

pub fn validate_bindings(dataset: &Dataset, doc: &PromptDocument) -> BindingReport {
    validate_variables(dataset, &doc.variables())
}
