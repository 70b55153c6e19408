//! Adam and the epoch loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ensemble::{EnsembleModel, Learner, Objective};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::metrics::evaluate;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;
use crate::text::EncodedBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err!("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: `m ← β1·m + (1-β1)·g`, `v ← β2·v + (1-β2)·g²`,
    /// `p ← p - lr·m̂ / (√v̂ + ε)` with `m̂`, `v̂` bias-corrected.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(contract_err!(
                "adam state tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(dim_err!(
                    "param {i} shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as f64;
        let correct1 = 1.0 - libm::pow(beta1, t);
        let correct2 = 1.0 - libm::pow(beta2, t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / correct1;
                let v_hat = *vi / correct2;
                *w -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            dropout: 0.0,
            adam: AdamConfig::default(),
            objective: Objective::Joint,
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch objective over the epoch.
    pub loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub validation_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based), when a validation set
    /// drove the selection.
    pub best_epoch: Option<usize>,
}

/// Mini-batch Adam over shuffled `data`. With `validation`, the parameters
/// of the epoch with the highest validation accuracy (earliest on ties)
/// are kept; otherwise the final ones are.
pub fn train(
    model: &mut EnsembleModel,
    data: &EncodedBatch,
    validation: Option<&EncodedBatch>,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(config_err!("batch_size must be at least 1"));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(config_err!("dropout must be in [0, 1), got {}", config.dropout));
    }
    config.adam.validate()?;
    if data.pad_length() < model.max_kernel() {
        return Err(config_err!(
            "pad length {} is shorter than kernel size {}",
            data.pad_length(),
            model.max_kernel()
        ));
    }

    let mut adam = AdamState::new(config.adam, model.named_params().into_iter().map(|(_, t)| t));
    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, Vec<Learner>)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.subset(chunk);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut mode = Mode::Train(&mut *rng);
            let (loss, predictions) = model.loss_on_tape(
                &mut tape,
                &bound,
                &batch,
                config.dropout,
                config.objective,
                &mut mode,
            )?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} in epoch {epoch}")));
            }
            for (p, &label) in predictions.iter().zip(batch.labels()) {
                correct += usize::from(tape.value(*p).argmax() == label);
            }
            let grads = tape.backward(loss)?.into_tensors();
            drop(tape);
            adam.step(&mut model.params_mut(), &grads)?;
            loss_sum += value;
            batches += 1;
        }

        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            validation_accuracy: None,
            validation_macro_f1: None,
        };
        if let Some(val) = validation.filter(|v| !v.is_empty()) {
            let metrics = evaluate(model, val)?;
            record.validation_accuracy = Some(metrics.accuracy);
            record.validation_macro_f1 = Some(metrics.macro_f1);
            if best.as_ref().is_none_or(|(acc, _, _)| metrics.accuracy > *acc) {
                best = Some((metrics.accuracy, epoch, model.learners().to_vec()));
            }
        }
        report.epochs.push(record);
    }

    if let Some((_, epoch, learners)) = best {
        model.learners_mut().clone_from_slice(&learners);
        report.best_epoch = Some(epoch);
    }
    Ok(report)
}
