//! Learners that share the embedding input but fork from the convolution
//! onward, one per kernel size, with their softmax outputs averaged.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, contract_err, Result};
use crate::layers::{learner_forward, ConvActivation, LayerConfig, LearnerParams};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, EncodedBatch};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Shape of one learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnerSpec {
    pub kernel_size: usize,
    pub filters: usize,
    pub units: usize,
    pub attention_dim: usize,
}

impl LearnerSpec {
    /// Spec with the attention width defaulting to `2 * units`.
    pub fn new(kernel_size: usize, filters: usize, units: usize) -> Self {
        Self {
            kernel_size,
            filters,
            units,
            attention_dim: 2 * units,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kernel_size", self.kernel_size),
            ("filters", self.filters),
            ("units", self.units),
            ("attention_dim", self.attention_dim),
        ] {
            if v == 0 {
                return Err(config_err!("learner {name} must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub spec: LearnerSpec,
    pub params: LearnerParams,
}

/// What the training loss is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Cross-entropy of the averaged prediction.
    #[default]
    Joint,
    /// Sum of each learner's own cross-entropy; learners do not interact.
    Independent,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Joint => "joint",
            Objective::Independent => "independent",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "joint" => Ok(Objective::Joint),
            "independent" => Ok(Objective::Independent),
            other => Err(config_err!("unknown training objective {other:?} (joint|independent)")),
        }
    }
}

/// Per-learner and averaged outputs of one ensemble forward pass.
#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub learner_probs: Vec<Var>,
    pub probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    learners: Vec<Learner>,
    embeddings: EmbeddingTable,
    labels: Vec<String>,
    conv_activation: ConvActivation,
}

/// Independent Glorot-initialised learners over one shared embedding table.
/// Labels default to `"0"`, `"1"`, ...
pub fn build_ensemble(
    specs: &[LearnerSpec],
    classes: usize,
    embeddings: EmbeddingTable,
    conv_activation: ConvActivation,
    rng: &mut impl Rng,
) -> Result<EnsembleModel> {
    if specs.is_empty() {
        return Err(config_err!("an ensemble needs at least one learner"));
    }
    let learners = specs
        .iter()
        .map(|spec| {
            Ok(Learner {
                spec: *spec,
                params: LearnerParams::glorot(spec, embeddings.dim(), classes, rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        learners,
        embeddings,
        labels: (0..classes).map(|c| format!("{c}")).collect(),
        conv_activation,
    })
}

impl EnsembleModel {
    /// Assembles a model from existing learners, checking that every
    /// tensor agrees with its spec, the table and the label count.
    pub fn from_parts(
        learners: Vec<Learner>,
        embeddings: EmbeddingTable,
        labels: Vec<String>,
        conv_activation: ConvActivation,
    ) -> Result<Self> {
        if learners.is_empty() {
            return Err(config_err!("an ensemble needs at least one learner"));
        }
        let classes = labels.len();
        for (i, learner) in learners.iter().enumerate() {
            let expected = LearnerParams::glorot(
                &learner.spec,
                embeddings.dim(),
                classes,
                &mut crate::seeded_rng(0),
            )?;
            for ((name, want), (_, got)) in expected.named().iter().zip(learner.params.named()) {
                if want.shape() != got.shape() {
                    return Err(contract_err!(
                        "learner {i} tensor {name} has shape {:?}, expected {:?}",
                        got.shape(),
                        want.shape()
                    ));
                }
            }
        }
        Ok(Self {
            learners,
            embeddings,
            labels,
            conv_activation,
        })
    }

    pub fn learners(&self) -> &[Learner] {
        &self.learners
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn set_labels(&mut self, labels: Vec<String>) -> Result<()> {
        if labels.len() != self.labels.len() {
            return Err(contract_err!(
                "{} label names for {} classes",
                labels.len(),
                self.labels.len()
            ));
        }
        self.labels = labels;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn conv_activation(&self) -> ConvActivation {
        self.conv_activation
    }

    /// Largest kernel size; inputs must be at least this long.
    pub fn max_kernel(&self) -> usize {
        self.learners.iter().map(|l| l.spec.kernel_size).max().unwrap_or(1)
    }

    /// Every parameter tensor with its qualified name, learner by learner.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.learners
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params
                    .named()
                    .into_iter()
                    .map(move |(name, t)| (format!("learner{i}.{name}"), t))
            })
            .collect()
    }

    /// Mutable parameters in the order of [`EnsembleModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.learners
            .iter_mut()
            .flat_map(|l| l.params.tensors_mut())
            .collect()
    }

    pub fn learners_mut(&mut self) -> &mut [Learner] {
        &mut self.learners
    }

    /// Registers all parameters on `tape`; gradients come back in
    /// [`EnsembleModel::named_params`] order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<LearnerParams<Var>> {
        self.learners.iter().map(|l| l.params.bind(tape)).collect()
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<LearnerParams<Var>> {
        self.learners.iter().map(|l| l.params.bind_frozen(tape)).collect()
    }

    /// Runs every learner on `ids` and averages their probability vectors.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[LearnerParams<Var>],
        ids: &[usize],
        dropout: f64,
        mode: &mut Mode<'_>,
    ) -> Result<EnsembleOutput> {
        let config = LayerConfig {
            dropout,
            conv_activation: self.conv_activation,
        };
        let mut learner_probs = Vec::with_capacity(bound.len());
        for params in bound {
            let act = learner_forward(tape, ids, &self.embeddings, params, &config, mode)?;
            learner_probs.push(act.probs);
        }
        let probs = running_mean(tape, &learner_probs)?;
        Ok(EnsembleOutput {
            learner_probs,
            probs,
        })
    }

    /// Averaged class distribution for one id sequence (inference mode).
    pub fn predict(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, ids, 0.0, &mut Mode::Eval)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Class distribution of learner `index` alone (inference mode).
    pub fn predict_learner(&self, index: usize, ids: &[usize]) -> Result<Tensor> {
        let learner = self
            .learners
            .get(index)
            .ok_or_else(|| contract_err!("no learner {index}"))?;
        let mut tape = Tape::new();
        let bound = learner.params.bind_frozen(&mut tape);
        let config = LayerConfig {
            dropout: 0.0,
            conv_activation: self.conv_activation,
        };
        let act = learner_forward(&mut tape, ids, &self.embeddings, &bound, &config, &mut Mode::Eval)?;
        Ok(tape.value(act.probs).clone())
    }

    pub fn predict_batch(&self, batch: &EncodedBatch) -> Result<Vec<Tensor>> {
        (0..batch.len()).map(|i| self.predict(batch.row(i))).collect()
    }

    /// Mean cross-entropy of `batch` recorded on `tape`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[LearnerParams<Var>],
        batch: &EncodedBatch,
        dropout: f64,
        objective: Objective,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        if batch.is_empty() {
            return Err(contract_err!("loss of an empty batch"));
        }
        let mut total: Option<Var> = None;
        let mut predictions = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let label = batch.labels()[i];
            if label >= self.classes() {
                return Err(contract_err!(
                    "label {label} outside {} classes",
                    self.classes()
                ));
            }
            let out = self.forward(tape, bound, batch.row(i), dropout, mode)?;
            let sources = match objective {
                Objective::Joint => core::slice::from_ref(&out.probs),
                Objective::Independent => &out.learner_probs[..],
            };
            for &probs in sources {
                let p = tape.pick(probs, label)?;
                let nll = tape.neg_log(p, PROB_FLOOR)?;
                total = Some(match total {
                    None => nll,
                    Some(t) => tape.add(t, nll)?,
                });
            }
            predictions.push(out.probs);
        }
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        Ok((loss, predictions))
    }

    /// Mean cross-entropy of the averaged prediction (inference mode).
    pub fn ensemble_loss(&self, batch: &EncodedBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let (loss, _) =
            self.loss_on_tape(&mut tape, &bound, batch, 0.0, Objective::Joint, &mut Mode::Eval)?;
        Ok(tape.value(loss).item())
    }
}

/// `m_1 = p_1`, `m_i = m_{i-1} + (p_i - m_{i-1}) / i`. Averaging identical
/// inputs returns them unchanged, bit for bit.
fn running_mean(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| contract_err!("mean of no learners"))?;
    let mut mean = first;
    for (i, &p) in rest.iter().enumerate() {
        let diff = tape.sub(p, mean)?;
        let step = tape.scale(diff, 1.0 / (i + 2) as f64)?;
        mean = tape.add(mean, step)?;
    }
    Ok(mean)
}
