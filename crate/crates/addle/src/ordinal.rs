//! Ordinal regression via binary decomposition (Frank–Hall).
//!
//! A K-class ordered label is reduced to K−1 binary "label > k" problems.
//! The loss is the sum of the K−1 logit-space binary cross-entropies, and
//! the scalar severity score is the sum of the K−1 head probabilities,
//! which lands in [0, K−1] and increases with every logit.

use crate::tape::{bce_logit_scalar, sigmoid_scalar};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Encodes label `y` of a K-class problem as the K−1 cutoff targets
/// `t_k = [y > k]`, a non-increasing 0/1 staircase.
pub fn encode_label(y: usize, num_classes: usize) -> Result<Vec<f64>> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "encode_label: need at least 2 classes, got {}",
            num_classes
        )));
    }
    if y >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "encode_label: label {} out of range for {} classes",
            y, num_classes
        )));
    }
    Ok((0..num_classes - 1)
        .map(|k| if y > k { 1.0 } else { 0.0 })
        .collect())
}

/// Encodes a batch of labels as a B×(K−1) target tensor.
pub fn encode_batch(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * (num_classes - 1));
    for &y in labels {
        data.extend(encode_label(y, num_classes)?);
    }
    Tensor::new(vec![labels.len(), num_classes - 1], data)
}

/// Binary-decomposition loss of one sample: Σ_k BCE(σ(logit_k), t_k),
/// computed in logit space for stability.
pub fn fh_loss(logits: &[f64], y: usize, num_classes: usize) -> Result<f64> {
    if logits.len() != num_classes - 1 {
        return Err(Error::shape(
            "fh_loss",
            format!("{} logits for {} classes", logits.len(), num_classes),
        ));
    }
    let targets = encode_label(y, num_classes)?;
    let mut acc = 0.0;
    for (&l, &t) in logits.iter().zip(&targets) {
        acc += bce_logit_scalar(l, t);
    }
    Ok(acc)
}

/// Severity score: the sum of the cutoff probabilities, in [0, K−1].
pub fn score(logits: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &l in logits {
        acc += sigmoid_scalar(l);
    }
    acc
}
