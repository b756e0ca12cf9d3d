use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Rmse,
    Mae,
    Auc,
    Accuracy,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Auc | MetricKind::Accuracy)
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Mae => "mae",
            MetricKind::Auc => "auc",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub value: f64,
}

fn paired(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("metric", format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = paired(pred, target)?;
    Ok((pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = paired(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::dim("accuracy", format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from average ranks.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::dim("auc", format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUC of NaN scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        twice_rank_sum += twice_mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}
