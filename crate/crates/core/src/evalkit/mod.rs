//! Classification metrics: confusion matrices, per-class rates with macro
//! and dispersion aggregates, train/test overfitting deltas, and
//! one-vs-rest ROC curves.

mod emit;
mod roc;

pub use emit::{comparison_tables, emit_report, read_report, TABLE1_HEADER, TABLE2_HEADER};
pub use roc::{roc_curve, RocCurve};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PROB_FLOOR;

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if classes == 0 || rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::shape("confusion", &[labels.len()], &[predictions.len()]));
    }
    if classes == 0 {
        return Err(Error::invalid("confusion needs at least one class"));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= classes || p >= classes {
            return Err(Error::invalid(format!("class pair ({t}, {p}) outside 0..{classes}")));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when some rate had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub recall_min: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-class rates and their unweighted aggregates. Standard deviations
/// are population deviations across classes.
pub fn classification_report(matrix: &ConfusionMatrix, class_names: &[String]) -> Result<ClassificationReport> {
    if matrix.total() == 0 {
        return Err(Error::invalid("classification report needs at least one sample"));
    }
    if class_names.len() != matrix.classes() {
        return Err(Error::shape(
            "classification_report",
            &[matrix.classes()],
            &[class_names.len()],
        ));
    }
    let per_class: Vec<ClassMetrics> = (0..matrix.classes())
        .map(|c| {
            let tp = matrix.get(c, c);
            let precision = ratio(tp, matrix.col_sum(c));
            let recall = ratio(tp, matrix.row_sum(c));
            let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
            let f1 = (p + r > 0.0).then(|| 2.0 * p * r / (p + r));
            ClassMetrics {
                name: class_names[c].clone(),
                precision: p,
                recall: r,
                f1: f1.unwrap_or(0.0),
                support: matrix.row_sum(c),
                degenerate: precision.is_none() || recall.is_none() || f1.is_none(),
            }
        })
        .collect();
    let f1s: Vec<f64> = per_class.iter().map(|m| m.f1).collect();
    let recalls: Vec<f64> = per_class.iter().map(|m| m.recall).collect();
    let (f1_mean, f1_std) = mean_std(&f1s);
    let (recall_mean, recall_std) = mean_std(&recalls);
    Ok(ClassificationReport {
        accuracy: matrix.accuracy(),
        macro_f1: f1_mean,
        f1_mean,
        f1_std,
        recall_mean,
        recall_std,
        recall_min: recalls.iter().copied().fold(f64::INFINITY, f64::min),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class: String,
    /// `None` when the evaluated set lacks positives or negatives for the
    /// class.
    pub curve: Option<RocCurve>,
}

/// Everything measured for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub samples: usize,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub loss: f64,
    pub macro_f1: f64,
    pub f1_std: f64,
    pub recall_min: f64,
    pub recall_std: f64,
    pub f1_mean: f64,
    pub recall_mean: f64,
    pub confusion: Vec<Vec<u64>>,
    pub roc: Vec<ClassRoc>,
    pub overfit_acc: Option<f64>,
    pub overfit_f1: Option<f64>,
    pub overfit_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverfitDeltas {
    pub acc: f64,
    pub f1: f64,
    /// Test minus train, so it is positive when the model overfits.
    pub loss: f64,
}

pub fn overfit_deltas(train: &EvalReport, test: &EvalReport) -> OverfitDeltas {
    OverfitDeltas {
        acc: train.accuracy - test.accuracy,
        f1: train.macro_f1 - test.macro_f1,
        loss: test.loss - train.loss,
    }
}

/// Arg-max per row, lowest index on ties.
pub fn argmax_rows(probs: &[f64], classes: usize) -> Vec<usize> {
    probs
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl EvalReport {
    /// Builds a report from row-major `N×C` class probabilities. The loss is
    /// the mean cross-entropy with probabilities floored at `1e-12`.
    pub fn from_probs(
        model: impl Into<String>,
        split: impl Into<String>,
        labels: &[usize],
        probs: &[f64],
        class_names: &[String],
    ) -> Result<Self> {
        let classes = class_names.len();
        if classes == 0 || probs.len() != labels.len() * classes {
            return Err(Error::shape("evaluate", &[labels.len(), classes], &[probs.len()]));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("probability {p}")));
        }
        let preds = argmax_rows(probs, classes);
        let matrix = confusion(labels, &preds, classes)?;
        let cr = classification_report(&matrix, class_names)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * classes + l].clamp(PROB_FLOOR, 1.0).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let roc = (0..classes)
            .map(|c| {
                let scores: Vec<f64> = probs.iter().skip(c).step_by(classes).copied().collect();
                let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                let has_both = positives.iter().any(|&b| b) && positives.iter().any(|&b| !b);
                Ok(ClassRoc {
                    class: class_names[c].clone(),
                    curve: if has_both {
                        Some(roc_curve(&scores, &positives)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            model: model.into(),
            split: split.into(),
            samples: labels.len(),
            accuracy: cr.accuracy,
            loss,
            macro_f1: cr.macro_f1,
            f1_std: cr.f1_std,
            recall_min: cr.recall_min,
            recall_std: cr.recall_std,
            f1_mean: cr.f1_mean,
            recall_mean: cr.recall_mean,
            per_class: cr.per_class,
            confusion: matrix.rows(),
            roc,
            overfit_acc: None,
            overfit_f1: None,
            overfit_loss: None,
        })
    }

    /// Fills the overfit fields with deltas against a report on training
    /// data.
    pub fn set_overfit(&mut self, train: &EvalReport) {
        let d = overfit_deltas(train, self);
        self.overfit_acc = Some(d.acc);
        self.overfit_f1 = Some(d.f1);
        self.overfit_loss = Some(d.loss);
    }

    pub fn class_names(&self) -> Vec<String> {
        self.per_class.iter().map(|m| m.name.clone()).collect()
    }

    pub fn auc(&self, class: usize) -> Option<f64> {
        self.roc.get(class)?.curve.as_ref().map(|c| c.auc)
    }
}
