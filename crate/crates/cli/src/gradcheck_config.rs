//! File and override form of the gradient-check miniature.

use std::path::Path;

use ecga_core::ensemble::Objective;
use ecga_core::gradcheck::GradcheckConfig;
use ecga_core::layers::ConvActivation;
use ecga_core::tape::Primitive;
use serde::{Deserialize, Serialize};
use toml::Table;

use crate::config::{apply_overrides, from_table, read_table};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSettings {
    pub pad_length: usize,
    pub embedding_dim: usize,
    pub vocab_size: usize,
    pub filters: usize,
    pub units: usize,
    pub attention_dim: usize,
    pub classes: usize,
    pub kernel_sizes: Vec<usize>,
    pub conv_activation: String,
    pub training: String,
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Name of a primitive whose backward rule is deliberately corrupted;
    /// empty for none. Only useful to confirm the check can fail.
    pub fault: String,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        let d = GradcheckConfig::default();
        Self {
            pad_length: d.pad_length,
            embedding_dim: d.embedding_dim,
            vocab_size: d.vocab_size,
            filters: d.filters,
            units: d.units,
            attention_dim: d.attention_dim,
            classes: d.classes,
            kernel_sizes: d.kernel_sizes,
            conv_activation: d.conv_activation.name().into(),
            training: d.objective.name().into(),
            batch_size: d.batch_size,
            step: d.step,
            tolerance: d.tolerance,
            seed: d.seed,
            fault: String::new(),
        }
    }
}

impl GradcheckSettings {
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = Table::try_from(Self::default()).expect("settings serialize");
        if let Some(path) = file {
            for (k, v) in read_table(path)? {
                table.insert(k, v);
            }
        }
        apply_overrides(&mut table, overrides)?;
        from_table(table, "gradcheck config")
    }

    pub fn to_config(&self) -> Result<GradcheckConfig, CliError> {
        let fault = match self.fault.as_str() {
            "" => None,
            name => Some(Primitive::from_name(name).ok_or_else(|| {
                let known: Vec<&str> = Primitive::ALL.iter().map(|p| p.name()).collect();
                CliError::Usage(format!("invalid fault: {name:?} is not one of {}", known.join(", ")))
            })?),
        };
        if !(self.tolerance > 0.0) {
            return Err(CliError::Usage("invalid tolerance: must be positive".into()));
        }
        Ok(GradcheckConfig {
            pad_length: self.pad_length,
            embedding_dim: self.embedding_dim,
            vocab_size: self.vocab_size,
            filters: self.filters,
            units: self.units,
            attention_dim: self.attention_dim,
            classes: self.classes,
            kernel_sizes: self.kernel_sizes.clone(),
            conv_activation: ConvActivation::from_name(&self.conv_activation)
                .map_err(|e| CliError::Usage(format!("invalid conv_activation: {e}")))?,
            objective: Objective::from_name(&self.training)
                .map_err(|e| CliError::Usage(format!("invalid training: {e}")))?,
            batch_size: self.batch_size,
            step: self.step,
            tolerance: self.tolerance,
            seed: self.seed,
            fault,
        })
    }
}
