//! Delimited dataset files with a configurable column layout.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSchema {
    pub delimiter: u8,
    pub has_header: bool,
    pub label_column: usize,
    pub text_columns: Vec<usize>,
}

/// Raw label strings and texts, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawDataset {
    pub labels: Vec<String>,
    pub texts: Vec<String>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn read_dataset(path: &Path, schema: &DatasetSchema) -> Result<RawDataset, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset(file, schema).map_err(|e| match e {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Comma files honour double quotes; other delimiters are read literally
/// so stray quotes inside tweets survive.
pub fn parse_dataset(input: impl std::io::Read, schema: &DatasetSchema) -> Result<RawDataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(schema.has_header)
        .flexible(true)
        .quoting(schema.delimiter == b',')
        .from_reader(input);
    let mut out = RawDataset::default();
    let needed = schema
        .text_columns
        .iter()
        .copied()
        .chain([schema.label_column])
        .max()
        .unwrap_or(0);
    for (i, record) in reader.records().enumerate() {
        let row = i + 1 + usize::from(schema.has_header);
        let record = record.map_err(|e| CliError::Usage(format!("row {row}: {e}")))?;
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() <= needed {
            return Err(CliError::Usage(format!(
                "row {row} has {} columns, schema needs column {needed}",
                record.len()
            )));
        }
        out.labels.push(record[schema.label_column].trim().to_owned());
        let text: Vec<&str> = schema.text_columns.iter().map(|&c| &record[c]).collect();
        out.texts.push(text.join(" "));
    }
    Ok(out)
}

/// Ordered class names and the mapping from raw label strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    /// `configured` when non-empty, otherwise the sorted distinct labels.
    pub fn new(configured: &[String], observed: &[String]) -> Result<Self, CliError> {
        let names: Vec<String> = if configured.is_empty() {
            observed.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
        } else {
            configured.to_vec()
        };
        if names.len() < 2 {
            return Err(CliError::Usage(format!(
                "need at least two classes, found {names:?}"
            )));
        }
        Ok(Self { names })
    }

    pub fn from_names(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_all(&self, labels: &[String]) -> Result<Vec<usize>, CliError> {
        labels
            .iter()
            .enumerate()
            .map(|(row, l)| {
                self.names.iter().position(|n| n == l).ok_or_else(|| {
                    CliError::Usage(format!(
                        "example {} has label {l:?}, not one of {:?}",
                        row + 1,
                        self.names
                    ))
                })
            })
            .collect()
    }
}
