//! Confusion-matrix classification metrics with macro averaging.
//!
//! A per-class precision, recall, or F1 term whose denominator is zero
//! contributes 0 to the macro mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_FLOOR: f64 = 1e-12;

/// `counts[t * C + p]` samples with true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidShape("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { classes: c, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch { op: "accumulate", lhs: vec![truth.len()], rhs: vec![pred.len()] });
        }
        let c = self.classes;
        if let Some(&bad) = truth.iter().chain(pred).find(|&&i| i >= c) {
            return Err(Error::InvalidArgument(format!("class index {bad} out of range for {c} classes")));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch { op: "merge", lhs: vec![self.classes], rhs: vec![other.classes] });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Empty("confusion matrix has no samples".into()));
        }
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&r| r != c).map(|r| self.get(r, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    pub fn class_precision(&self, c: usize) -> f64 {
        ratio(self.true_positives(c), self.true_positives(c) + self.false_positives(c))
    }

    pub fn class_recall(&self, c: usize) -> f64 {
        ratio(self.true_positives(c), self.true_positives(c) + self.false_negatives(c))
    }

    pub fn class_f1(&self, c: usize) -> f64 {
        let (p, r) = (self.class_precision(c), self.class_recall(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn macro_mean(&self, f: impl Fn(usize) -> f64) -> Result<f64> {
        self.nonempty()?;
        Ok((0..self.classes).map(f).sum::<f64>() / self.classes as f64)
    }

    pub fn macro_precision(&self) -> Result<f64> {
        self.macro_mean(|c| self.class_precision(c))
    }

    pub fn macro_recall(&self) -> Result<f64> {
        self.macro_mean(|c| self.class_recall(c))
    }

    pub fn macro_f1(&self) -> Result<f64> {
        self.macro_mean(|c| self.class_f1(c))
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean per-sample cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub mean: f64,
    /// A true-class probability was below the floor and was clamped.
    pub floored: bool,
}

/// `-(1/N) sum_i log p[i, y_i]` over row-major `[N, C]` probabilities.
pub fn cross_entropy_metric(probs: &[f64], classes: usize, truth: &[usize]) -> Result<CrossEntropy> {
    if classes == 0 || probs.len() != truth.len() * classes {
        return Err(Error::ShapeMismatch { op: "cross_entropy", lhs: vec![probs.len()], rhs: vec![truth.len(), classes] });
    }
    if truth.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    let mut sum = 0.0;
    let mut floored = false;
    for (row, &y) in probs.chunks(classes).zip(truth) {
        if y >= classes {
            return Err(Error::InvalidArgument(format!("class index {y} out of range for {classes} classes")));
        }
        let p = row[y];
        if !p.is_finite() || p < 0.0 {
            return Err(Error::NonFinite { op: format!("probability {p}") });
        }
        if p < PROB_FLOOR {
            floored = true;
        }
        sum -= p.max(PROB_FLOOR).ln();
    }
    Ok(CrossEntropy { mean: sum / truth.len() as f64, floored })
}

/// Labels, predictions, and optionally row-major `[N, C]` probabilities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionBatch {
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub probabilities: Option<Vec<f64>>,
}

impl PredictionBatch {
    /// Argmax predictions from probability rows (first maximum wins).
    pub fn from_probabilities(truth: Vec<usize>, probabilities: Vec<f64>, classes: usize) -> Self {
        let predicted = probabilities.chunks(classes).map(argmax).collect();
        PredictionBatch { truth, predicted, probabilities: Some(probabilities) }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    /// Mean per sample; multiply by `n_samples` for the summed loss.
    pub ce_loss_mean: f64,
    pub n_samples: u64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn new(cm: &ConfusionMatrix, ce_loss_mean: f64) -> Result<Self> {
        Ok(MetricsReport {
            accuracy: cm.accuracy()?,
            precision_macro: cm.macro_precision()?,
            recall_macro: cm.macro_recall()?,
            f1_macro: cm.macro_f1()?,
            ce_loss_mean,
            n_samples: cm.total(),
            confusion: cm.rows(),
        })
    }

    pub fn from_batch(batch: &PredictionBatch, classes: usize) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&batch.truth, &batch.predicted)?;
        let ce = match &batch.probabilities {
            Some(p) => cross_entropy_metric(p, classes, &batch.truth)?.mean,
            None => f64::NAN,
        };
        Self::new(&cm, ce)
    }

    pub fn confusion_matrix(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_rows(&self.confusion)
    }
}
