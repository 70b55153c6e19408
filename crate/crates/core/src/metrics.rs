//! Classification metrics: accuracy, error rate, per-class and macro F1.

use alloc::vec;
use alloc::vec::Vec;

use crate::ensemble::EnsembleModel;
use crate::error::{contract_err, Result};
use crate::text::EncodedBatch;

/// Class whose F1 is reported as `positive_f1` (the churny class in the
/// binary presets).
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub error_rate: f64,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    pub positive_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// Metrics from a square confusion matrix (rows are true classes).
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(contract_err!("confusion matrix must be square and non-empty"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let accuracy = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        let per_class: Vec<ClassScores> = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let predicted: u64 = (0..c).map(|i| confusion[i][k]).sum();
                let support: u64 = confusion[k].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / c as f64;
        let positive_f1 = per_class.get(POSITIVE_CLASS).map_or(0.0, |s| s.f1);
        Ok(Self {
            accuracy,
            error_rate: 1.0 - accuracy,
            per_class,
            macro_f1,
            positive_f1,
            confusion,
        })
    }

    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(contract_err!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            ));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(contract_err!("class index outside {classes} classes"));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Argmax predictions (ties to the lower class) scored against the labels.
pub fn evaluate(model: &EnsembleModel, data: &EncodedBatch) -> Result<MetricsReport> {
    let predicted = predict_classes(model, data)?;
    MetricsReport::from_predictions(&predicted, data.labels(), model.classes())
}

pub fn predict_classes(model: &EnsembleModel, data: &EncodedBatch) -> Result<Vec<usize>> {
    (0..data.len())
        .map(|i| Ok(model.predict(data.row(i))?.argmax()))
        .collect()
}
