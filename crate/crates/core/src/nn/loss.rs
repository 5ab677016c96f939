use crate::error::{Error, Result};

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln p[label]` with the probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probabilities: &[f64], label: usize) -> Result<f64> {
    let p = probabilities
        .get(label)
        .ok_or(Error::LabelOutOfRange {
            label,
            classes: probabilities.len(),
        })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Gradient of `weight * cross_entropy(softmax(z), label)` w.r.t. the logits `z`.
pub(crate) fn softmax_cross_entropy_grad(probabilities: &[f64], label: usize, weight: f64) -> Vec<f64> {
    probabilities
        .iter()
        .enumerate()
        .map(|(i, &p)| weight * (p - if i == label { 1.0 } else { 0.0 }))
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
