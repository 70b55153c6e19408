//! Central finite differences against tape gradients, tensor by tensor.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::ensemble::{build_ensemble, EnsembleModel, LearnerSpec, Objective};
use crate::error::{config_err, Result};
use crate::layers::ConvActivation;
use crate::tape::{Mode, Primitive, Tape};
use crate::text::{EmbeddingTable, EncodedBatch};

/// Miniature ensemble and batch used for the check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub pad_length: usize,
    pub embedding_dim: usize,
    pub vocab_size: usize,
    pub filters: usize,
    pub units: usize,
    /// 0 means `2 * units`.
    pub attention_dim: usize,
    pub classes: usize,
    pub kernel_sizes: Vec<usize>,
    pub conv_activation: ConvActivation,
    pub objective: Objective,
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Corrupts one primitive's backward rule; the check should then fail.
    pub fault: Option<Primitive>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            pad_length: 6,
            embedding_dim: 3,
            vocab_size: 12,
            filters: 4,
            units: 2,
            attention_dim: 0,
            classes: 3,
            kernel_sizes: vec![1, 2],
            conv_activation: ConvActivation::Relu,
            objective: Objective::Joint,
            batch_size: 2,
            step: 1e-4,
            tolerance: 1e-3,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error.is_finite())
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Below this magnitude gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds the miniature described by `config` and checks every tensor.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.kernel_sizes.is_empty() {
        return Err(config_err!("gradcheck needs at least one kernel size"));
    }
    if config.vocab_size < 3 || config.batch_size == 0 {
        return Err(config_err!("gradcheck needs vocab_size >= 3 and batch_size >= 1"));
    }
    if !(config.step > 0.0) {
        return Err(config_err!("finite-difference step must be positive"));
    }
    let mut rng = crate::seeded_rng(config.seed);
    let attention_dim = if config.attention_dim == 0 {
        2 * config.units
    } else {
        config.attention_dim
    };
    let specs: Vec<LearnerSpec> = config
        .kernel_sizes
        .iter()
        .map(|&k| LearnerSpec {
            kernel_size: k,
            filters: config.filters,
            units: config.units,
            attention_dim,
        })
        .collect();
    let table = EmbeddingTable::random(config.vocab_size, config.embedding_dim, &mut rng)?;
    let mut model = build_ensemble(&specs, config.classes, table, config.conv_activation, &mut rng)?;
    // Biases start at zero; perturb them so their rules are exercised.
    for t in model.params_mut() {
        if t.shape().len() == 1 {
            for x in t.data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
    }
    let rows = (0..config.batch_size)
        .map(|_| {
            (0..config.pad_length)
                .map(|_| rng.random_range(2..config.vocab_size))
                .collect()
        })
        .collect();
    let labels = (0..config.batch_size)
        .map(|_| rng.random_range(0..config.classes))
        .collect();
    let batch = EncodedBatch::new(config.pad_length, rows, labels)?;
    let tensors = check_model(&model, &batch, config.objective, config.step, config.fault)?;
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        tensors,
    })
}

/// Compares tape gradients of the batch loss with central differences for
/// every parameter tensor of `model`.
pub fn check_model(
    model: &EnsembleModel,
    batch: &EncodedBatch,
    objective: Objective,
    step: f64,
    fault: Option<Primitive>,
) -> Result<Vec<TensorCheck>> {
    let mut tape = Tape::new();
    if let Some(p) = fault {
        tape.inject_fault(p);
    }
    let bound = model.bind(&mut tape);
    let (loss, _) = model.loss_on_tape(&mut tape, &bound, batch, 0.0, objective, &mut Mode::Eval)?;
    let analytic = tape.backward(loss)?.into_tensors();
    drop(tape);

    let loss_at = |m: &EnsembleModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind_frozen(&mut tape);
        let (loss, _) = m.loss_on_tape(&mut tape, &bound, batch, 0.0, objective, &mut Mode::Eval)?;
        Ok(tape.value(loss).item())
    };

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let entries = analytic[ti].numel();
        let mut worst: f64 = 0.0;
        for j in 0..entries {
            let original = probe.params_mut()[ti].data()[j];
            probe.params_mut()[ti].data_mut()[j] = original + step;
            let plus = loss_at(&probe)?;
            probe.params_mut()[ti].data_mut()[j] = original - step;
            let minus = loss_at(&probe)?;
            probe.params_mut()[ti].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[ti].data()[j], numeric);
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
            if worst.is_nan() {
                break;
            }
        }
        out.push(TensorCheck {
            name,
            entries,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
