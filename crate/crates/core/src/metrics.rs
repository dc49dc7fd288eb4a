//! Balanced accuracy and AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[u8], labels: &[u8]) -> Result<Self> {
        if preds.len() != labels.len() {
            return dim_err(format!("{} predictions for {} labels", preds.len(), labels.len()));
        }
        let mut c = Self::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p != 0, y != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn balanced_accuracy(&self) -> Result<f64> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(Error::Metric(format!("balanced accuracy needs both classes, got {p} positive / {n} negative")));
        }
        Ok((self.tp as f64 / p as f64 + self.tn as f64 / n as f64) / 2.0)
    }
}

/// Mean of true-positive and true-negative rate.
pub fn balanced_accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    Confusion::from_predictions(preds, labels)?.balanced_accuracy()
}

/// Area under the ROC curve from rank sums, ties at their mid rank.
///
/// Equals the fraction of positive/negative pairs where the positive scores
/// higher, counting ties as one half. Computed in integer half-units so the
/// result matches pairwise counting exactly.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return dim_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} cannot be ranked")));
    }
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUROC needs both classes, got {pos} positive / {neg} negative")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of the positives; a tie group over 1-based ranks
    // lo..=hi has mid rank (lo + hi) / 2.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let twice_mid = (start + 1 + end) as u128;
        let group_pos = idx[start..end].iter().filter(|&&i| labels[i] != 0).count() as u128;
        twice_rank_sum += twice_mid * group_pos;
        start = end;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Metrics for one split. `scores` keeps bag order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub balanced_accuracy: f64,
    pub auroc: f64,
    pub confusion: Confusion,
    pub scores: Vec<f64>,
}

impl EvalResult {
    /// Predictions threshold the score at one half.
    pub fn from_scores(scores: Vec<f64>, labels: &[u8]) -> Result<Self> {
        let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
        let confusion = Confusion::from_predictions(&preds, labels)?;
        Ok(Self { balanced_accuracy: confusion.balanced_accuracy()?, auroc: auroc(&scores, labels)?, confusion, scores })
    }
}

/// One line of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub balanced_accuracy: f64,
    pub auroc: f64,
    pub confusion: Confusion,
    pub epochs: usize,
    pub wall_time_s: f64,
}

impl MetricRecord {
    pub fn new(variant: &str, seed: u64, split: &str, result: &EvalResult, epochs: usize, wall_time_s: f64) -> Self {
        Self {
            variant: variant.to_string(),
            seed,
            split: split.to_string(),
            balanced_accuracy: result.balanced_accuracy,
            auroc: result.auroc,
            confusion: result.confusion,
            epochs,
            wall_time_s,
        }
    }
}

/// Mean and sample standard deviation (`n − 1` denominator).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Metric(format!("need at least two values for a sample deviation, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
