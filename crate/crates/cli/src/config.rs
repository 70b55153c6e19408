//! Run configuration: named presets, flat TOML files and `key=value`
//! overrides, layered in that order.

use std::path::Path;

use ecga_core::ensemble::{LearnerSpec, Objective};
use ecga_core::layers::ConvActivation;
use ecga_core::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dataset::DatasetSchema;
use crate::error::CliError;

pub const PRESETS: &[&str] = &[
    "dbpedia",
    "dbpedia_cga",
    "argmine_task_a",
    "argmine_task_a_cga_vr",
    "argmine_task_a_cga_di",
    "argmine_task_c",
    "churn",
    "churn_cga",
    "custom",
];

/// Every knob of a training run. Serialized as flat TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,

    /// Delimited training file.
    pub train_path: String,
    /// Optional held-out test file; empty means none.
    pub test_path: String,
    /// Word-vector text file; empty means random frozen vectors.
    pub embeddings_path: String,
    /// Width of the random vectors used when `embeddings_path` is empty.
    pub embedding_dim: usize,
    pub output_dir: String,

    /// Single-character field separator.
    pub delimiter: String,
    pub has_header: bool,
    pub label_column: usize,
    /// Concatenated with a space in this order.
    pub text_columns: Vec<usize>,
    /// Fixed class order; empty means the sorted distinct training labels.
    pub label_names: Vec<String>,

    /// Apply the tweet normalisation before tokenizing.
    pub clean_text: bool,
    pub pad_length: usize,
    /// Non-reserved vocabulary cap; 0 means uncapped.
    pub vocab_cap: usize,
    /// Drop training tokens that have no pretrained vector.
    pub vocab_from_embeddings: bool,

    /// One learner per entry.
    pub kernel_sizes: Vec<usize>,
    pub filters: usize,
    pub units: usize,
    /// 0 means `2 * units`.
    pub attention_dim: usize,
    /// `relu` or `none`.
    pub conv_activation: String,
    pub dropout: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of the training data held out for best-epoch selection.
    pub validation_fraction: f64,
    /// `joint` or `independent`.
    pub training: String,

    /// Cross-validation folds; 0 disables cross-validation.
    pub kfold: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl RunConfig {
    fn base() -> Self {
        RunConfig {
            preset: "custom".into(),
            train_path: String::new(),
            test_path: String::new(),
            embeddings_path: String::new(),
            embedding_dim: 300,
            output_dir: "runs".into(),
            delimiter: "\t".into(),
            has_header: false,
            label_column: 0,
            text_columns: vec![1],
            label_names: Vec::new(),
            clean_text: false,
            pad_length: 60,
            vocab_cap: 0,
            vocab_from_embeddings: false,
            kernel_sizes: vec![2, 3],
            filters: 256,
            units: 128,
            attention_dim: 0,
            conv_activation: "relu".into(),
            dropout: 0.3,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 10,
            validation_fraction: 0.1,
            training: "joint".into(),
            kfold: 0,
            stratified: true,
            seed: 42,
        }
    }

    /// The fully populated configuration for a named preset.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let mut c = Self::base();
        c.preset = name.into();
        match name {
            "custom" => {
                c.pad_length = 50;
                c.filters = 64;
                c.units = 32;
            }
            "dbpedia" | "dbpedia_cga" => {
                c.delimiter = ",".into();
                c.text_columns = vec![1, 2];
                c.label_names = (1..=14).map(|i| i.to_string()).collect();
                c.vocab_from_embeddings = true;
                c.dropout = 0.3;
                c.learning_rate = 1e-4;
                c.beta1 = 0.7;
                c.beta2 = 0.99;
                c.filters = 256;
                c.units = 128;
                c.kernel_sizes = if name == "dbpedia" { vec![2, 3] } else { vec![2] };
            }
            "argmine_task_a" | "argmine_task_a_cga_vr" | "argmine_task_a_cga_di"
            | "argmine_task_c" => {
                c.vocab_from_embeddings = true;
                c.dropout = 0.5;
                let (kernels, filters, units) = match name {
                    "argmine_task_a" => (vec![2, 3], 256, 128),
                    "argmine_task_a_cga_vr" => (vec![2], 256, 128),
                    "argmine_task_a_cga_di" => (vec![2], 512, 256),
                    _ => (vec![2, 3], 512, 256),
                };
                c.kernel_sizes = kernels;
                c.filters = filters;
                c.units = units;
            }
            "churn" | "churn_cga" => {
                c.clean_text = true;
                c.pad_length = 50;
                c.vocab_cap = 1000;
                c.embedding_dim = 200;
                c.dropout = 0.3;
                c.kfold = 10;
                c.filters = 128;
                c.units = 64;
                c.kernel_sizes = if name == "churn" { vec![1, 2] } else { vec![2] };
                c.label_names = vec!["0".into(), "1".into()];
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        c.output_dir = format!("runs/{name}");
        Ok(c)
    }

    /// Preset, then file, then overrides; the result is validated.
    pub fn resolve(
        preset: Option<&str>,
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self, CliError> {
        let file_table = match file {
            Some(path) => Some(read_table(path)?),
            None => None,
        };
        let name = preset
            .map(str::to_owned)
            .or_else(|| {
                file_table
                    .as_ref()
                    .and_then(|t| t.get("preset"))
                    .and_then(Value::as_str)
                    .map(str::to_owned)
            })
            .unwrap_or_else(|| "custom".into());
        let base = Self::preset(&name)?;
        let mut table = Table::try_from(&base).expect("config serializes");
        if let Some(file_table) = file_table {
            for (k, v) in file_table {
                table.insert(k, v);
            }
        }
        table.insert("preset".into(), Value::String(name));
        apply_overrides(&mut table, overrides)?;
        let config: RunConfig = from_table(table, "config")?;
        config.validate()?;
        Ok(config)
    }

    /// Layers a config file and overrides over an already resolved config.
    pub fn layered(&self, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = Table::try_from(self).expect("config serializes");
        if let Some(path) = file {
            for (k, v) in read_table(path)? {
                table.insert(k, v);
            }
        }
        apply_overrides(&mut table, overrides)?;
        let config: RunConfig = from_table(table, "config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = from_text(text, "config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: &str| CliError::Usage(format!("invalid {field}: {why}"));
        if self.delimiter.chars().count() != 1 || !self.delimiter.is_ascii() {
            return Err(bad("delimiter", "must be a single ASCII character"));
        }
        if self.text_columns.is_empty() {
            return Err(bad("text_columns", "need at least one column"));
        }
        if self.text_columns.contains(&self.label_column) {
            return Err(bad("text_columns", "must not include label_column"));
        }
        if self.pad_length == 0 {
            return Err(bad("pad_length", "must be at least 1"));
        }
        if self.kernel_sizes.is_empty() {
            return Err(bad("kernel_sizes", "need at least one learner"));
        }
        if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k == 0 || k > self.pad_length) {
            return Err(bad("kernel_sizes", &format!("{k} is outside 1..=pad_length")));
        }
        for (field, v) in [
            ("filters", self.filters),
            ("units", self.units),
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return Err(bad(field, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(bad("validation_fraction", "must be in [0, 1)"));
        }
        if self.kfold == 1 {
            return Err(bad("kfold", "use 0 to disable or at least 2"));
        }
        self.adam()
            .validate()
            .map_err(|e| bad("adam settings", &e.to_string()))?;
        ConvActivation::from_name(&self.conv_activation)
            .map_err(|e| bad("conv_activation", &e.to_string()))?;
        Objective::from_name(&self.training).map_err(|e| bad("training", &e.to_string()))?;
        let mut names = self.label_names.clone();
        names.sort();
        names.dedup();
        if names.len() != self.label_names.len() {
            return Err(bad("label_names", "duplicate label"));
        }
        if !self.label_names.is_empty() && self.label_names.len() < 2 {
            return Err(bad("label_names", "need at least two classes"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn learner_specs(&self) -> Vec<LearnerSpec> {
        let attention_dim = if self.attention_dim == 0 {
            2 * self.units
        } else {
            self.attention_dim
        };
        self.kernel_sizes
            .iter()
            .map(|&kernel_size| LearnerSpec {
                kernel_size,
                filters: self.filters,
                units: self.units,
                attention_dim,
            })
            .collect()
    }

    pub fn conv_activation(&self) -> ConvActivation {
        ConvActivation::from_name(&self.conv_activation).expect("validated")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            dropout: self.dropout,
            adam: self.adam(),
            objective: Objective::from_name(&self.training).expect("validated"),
        }
    }

    pub fn vocab_cap(&self) -> Option<usize> {
        (self.vocab_cap > 0).then_some(self.vocab_cap)
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            delimiter: self.delimiter.as_bytes()[0],
            has_header: self.has_header,
            label_column: self.label_column,
            text_columns: self.text_columns.clone(),
        }
    }
}

/// Deserializes a table, naming the offending key when a value has the
/// wrong type.
pub(crate) fn from_table<T: serde::de::DeserializeOwned>(table: Table, what: &str) -> Result<T, CliError> {
    let text = toml::to_string(&table).expect("table serializes");
    from_text(&text, what)
}

fn from_text<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| {
        let key = e.span().and_then(|span| {
            let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = &text[start..];
            line.split_once('=').map(|(k, _)| k.trim().to_owned())
        });
        match key {
            Some(key) if !e.message().contains(&key) => {
                CliError::Usage(format!("invalid {what}: field {key}: {}", e.message()))
            }
            _ => CliError::Usage(format!("invalid {what}: {}", e.message())),
        }
    })
}

pub(crate) fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<Table>().map_err(|e| {
        CliError::Usage(format!("config file {}: {}", path.display(), e.message()))
    })
}

/// Applies `key=value` strings. Values are read as TOML literals and
/// coerced to the type already stored under the key, so `kernel_sizes=2`,
/// `dropout=0` and `train_path=data.tsv` all work unquoted.
pub(crate) fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), CliError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {item:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let Some(existing) = table.get(key) else {
            return Err(CliError::Usage(format!("unknown config field {key:?}")));
        };
        let parsed = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"));
        let value = match (existing, parsed) {
            (Value::String(_), Some(Value::String(s))) => Value::String(s),
            (Value::String(_), _) => Value::String(raw.to_owned()),
            (Value::Float(_), Some(Value::Integer(i))) => Value::Float(i as f64),
            (Value::Array(_), Some(Value::Array(a))) => Value::Array(a),
            (Value::Array(_), Some(v)) => Value::Array(vec![v]),
            (Value::Array(_), None) => Value::Array(
                raw.split(',')
                    .map(|s| match s.trim().parse::<i64>() {
                        Ok(i) => Value::Integer(i),
                        Err(_) => Value::String(s.trim().to_owned()),
                    })
                    .collect(),
            ),
            (_, Some(v)) => v,
            (_, None) => {
                return Err(CliError::Usage(format!("invalid value for {key}: {raw:?}")));
            }
        };
        table.insert(key.to_owned(), value);
    }
    Ok(())
}
