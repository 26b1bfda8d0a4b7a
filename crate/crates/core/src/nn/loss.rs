use super::NnError;
use crate::tensor::Tensor;

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor), NnError> {
    if pred.len() != target.len() {
        return Err(NnError::Shape {
            what: "mse operands",
            expected: pred.len().to_string(),
            actual: target.len().to_string(),
        });
    }
    let n = pred.len() as f64;
    let mut grad = pred.clone();
    let mut sum = 0.0;
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let diff = *g - t;
        sum += diff * diff;
        *g = 2.0 * diff / n;
    }
    Ok((sum / n, grad))
}

/// Softmax cross-entropy of `logits` against class index `label`, with the
/// gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor), NnError> {
    if label >= logits.len() {
        return Err(NnError::Shape {
            what: "class label",
            expected: format!("< {}", logits.len()),
            actual: label.to_string(),
        });
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = logits.clone();
    let mut z = 0.0;
    for p in probs.data_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    probs.scale(1.0 / z);
    let loss = -(probs.data()[label].max(f64::MIN_POSITIVE)).ln();
    probs.data_mut()[label] -= 1.0;
    Ok((loss, probs))
}
