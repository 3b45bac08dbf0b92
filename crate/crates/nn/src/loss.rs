use crate::error::{shape_err, Result};

/// Mean absolute error and its (sub)gradient with respect to `pred`.
///
/// The subgradient at an exact tie is 0.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(shape_err(format!("mae: {} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(shape_err("mae: empty input"));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        loss += d.abs();
        grad.push(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    Ok((loss / n, grad))
}

/// Numerically stable softmax.
pub fn softmax(e: &[f64]) -> Vec<f64> {
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = e.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / z).collect()
}
