//! Weighted binary cross-entropy on logits.
//!
//! Per task the loss is `-[p·y·log σ(x) + (1-y)·log(1-σ(x))]`, written with
//! `-log σ(x) = softplus(-x)` and `-log(1-σ(x)) = softplus(x)` so that it stays
//! finite for any finite logit.

use crate::graph::sigmoid;

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn bce_term(x: f64, y: f64, pos_weight: f64) -> f64 {
    pos_weight * y * softplus(-x) + (1.0 - y) * softplus(x)
}

/// d/dx of [`bce_term`].
#[inline]
pub fn bce_term_grad(x: f64, y: f64, pos_weight: f64) -> f64 {
    -pos_weight * y * sigmoid(-x) + (1.0 - y) * sigmoid(x)
}

/// Loss of one sample: the per-task terms summed over tasks.
pub fn bce_logits_loss(logits: &[f64], labels: &[f64], pos_weight: &[f64]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    assert_eq!(logits.len(), pos_weight.len());
    logits
        .iter()
        .zip(labels)
        .zip(pos_weight)
        .map(|((&x, &y), &p)| bce_term(x, y, p))
        .sum()
}

/// Plain (unweighted) binary cross-entropy on logits.
pub fn bce_unweighted(logits: &[f64], labels: &[f64]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
        .sum()
}

/// Batch loss: per-sample task sums averaged over the batch.
pub fn batch_loss(logits: &[Vec<f64>], labels: &[Vec<f64>], pos_weight: &[f64]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(x, y)| bce_logits_loss(x, y, pos_weight))
        .sum();
    total / logits.len() as f64
}

/// `n_negative / n_positive` per task. Tasks without positives get 1.
pub fn pos_weights(labels: &[[u8; crate::N_TASKS]]) -> Vec<f64> {
    (0..crate::N_TASKS)
        .map(|k| {
            let pos = labels.iter().filter(|l| l[k] == 1).count();
            let neg = labels.len() - pos;
            if pos == 0 || neg == 0 {
                1.0
            } else {
                neg as f64 / pos as f64
            }
        })
        .collect()
}
