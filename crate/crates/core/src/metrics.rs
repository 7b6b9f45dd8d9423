//! Classification metrics and support-weighted averaging.

use serde::Serialize;

use crate::error::{Error, Result};

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyVector);
    }
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), actual: preds.len() });
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `matrix[true][predicted]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    check_pair(preds, labels)?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        for label in [p, l] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Multiclass Matthews correlation (Gorodkin's R_K); equals the classical
/// binary MCC for two classes. Zero when either marginal is degenerate.
pub fn mcc(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    let m = confusion_matrix(preds, labels, classes)?;
    let s = preds.len() as f64;
    let correct: f64 = (0..classes).map(|k| m[k][k] as f64).sum();
    let true_counts: Vec<f64> = (0..classes).map(|k| m[k].iter().sum::<u64>() as f64).collect();
    let pred_counts: Vec<f64> = (0..classes).map(|k| (0..classes).map(|t| m[t][k]).sum::<u64>() as f64).collect();
    let cov_pt: f64 = correct * s - pred_counts.iter().zip(&true_counts).map(|(p, t)| p * t).sum::<f64>();
    let cov_pp = s * s - pred_counts.iter().map(|p| p * p).sum::<f64>();
    let cov_tt = s * s - true_counts.iter().map(|t| t * t).sum::<f64>();
    if cov_pp == 0.0 || cov_tt == 0.0 {
        return Ok(0.0);
    }
    Ok((cov_pt / (cov_pp * cov_tt).sqrt()).clamp(-1.0, 1.0))
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half (average-rank Mann-Whitney form).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), actual: scores.len() });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the average rank
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// `Σ w_c m_c / Σ w_c`.
pub fn weighted_average(metrics: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    metrics.iter().zip(weights).map(|(m, w)| w / total * m).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mcc: f64,
    /// Binary tasks only.
    pub auc: Option<f64>,
    pub support: usize,
}

/// Evaluates predictions with class probabilities; AUC uses the positive
/// class probability when there are exactly two classes and both appear.
pub fn evaluate(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<EvalResult> {
    let preds: Vec<usize> = probs.iter().map(|p| crate::mil::argmax(p)).collect();
    let auc = if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let binary: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        auc(&scores, &binary).ok()
    } else {
        None
    };
    Ok(EvalResult { accuracy: accuracy(&preds, labels)?, mcc: mcc(&preds, labels, classes)?, auc, support: labels.len() })
}
