//! Evaluation metrics: accuracy, ROC AUC via trapezoidal rank integration,
//! and column-normalized confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};

pub fn accuracy(predicted: &[usize], actual: &[usize]) -> Result<f64> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return data_err("accuracy wants equal-length, non-empty label lists");
    }
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Area under the ROC curve for binary labels (1 = positive), computed by
/// average-rank integration — the exact trapezoidal area, with ties
/// contributing half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return data_err("auc wants equal-length, non-empty score/label lists");
    }
    if labels.iter().any(|&l| l > 1) {
        return data_err("auc labels must be 0 or 1");
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return data_err("auc scores must be finite");
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return data_err("auc needs both classes present");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks over tie groups, then the Mann-Whitney identity.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Counts indexed by (predicted row, actual column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn from_pairs(classes: usize, predicted: &[usize], actual: &[usize]) -> Result<Self> {
        if classes == 0 {
            return data_err("confusion matrix needs at least one class");
        }
        if predicted.len() != actual.len() {
            return data_err("confusion matrix wants equal-length label lists");
        }
        let mut counts = vec![0usize; classes * classes];
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= classes || a >= classes {
                return data_err(format!("label out of range: predicted {p}, actual {a}"));
            }
            counts[p * classes + a] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn count(&self, predicted: usize, actual: usize) -> usize {
        self.counts[predicted * self.classes + actual]
    }

    /// Each column (actual class) normalized to sum to 1; empty columns stay
    /// zero.
    pub fn column_normalized(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.classes]; self.classes];
        for a in 0..self.classes {
            let total: usize = (0..self.classes).map(|p| self.count(p, a)).sum();
            if total == 0 {
                continue;
            }
            for (p, row) in out.iter_mut().enumerate() {
                row[a] = self.count(p, a) as f64 / total as f64;
            }
        }
        out
    }
}
