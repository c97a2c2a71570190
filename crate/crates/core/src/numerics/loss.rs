use super::mlp::softmax;
use crate::error::{arg_err, dim_err, Result};

/// Cross-entropy of `softmax(logits)` against a probability vector.
///
/// Returns the loss `−Σ target·log softmax(logits)` and its gradient
/// `softmax(logits) − target` w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return dim_err(format!(
            "{} logits vs {} target entries",
            logits.len(),
            target.len()
        ));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-9 || target.iter().any(|&t| t < 0.0) {
        return arg_err(format!("target is not a probability vector (sum {total})"));
    }
    Ok(cross_entropy_unchecked(logits, target))
}

pub(crate) fn cross_entropy_unchecked(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = target
        .iter()
        .zip(logits)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, z)| -t * (z - lse))
        .sum();
    let p = softmax(logits);
    let grad = p.iter().zip(target).map(|(p, t)| p - t).collect();
    (loss, grad)
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}
