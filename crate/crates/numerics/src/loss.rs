//! Binary focal loss and L1 regression loss.

use crate::error::{dim_err, Result};
use crate::nn::sigmoid;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Binary focal loss on a probability.
///
/// `target = 1`: `-α (1-p)^γ ln p`; `target = 0`: `-(1-α) p^γ ln(1-p)`.
pub fn focal_loss(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if target {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// d focal / d p on the clamped probability (zero where the clamp is active).
pub fn focal_loss_grad_p(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    // γ·x^(γ-1) with the γ = 0 case kept finite.
    let pow_m1 = |x: f64| if gamma == 0.0 { 0.0 } else { gamma * x.powf(gamma - 1.0) };
    if target {
        let q = 1.0 - p;
        alpha * (pow_m1(q) * p.ln() - q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        -(1.0 - alpha) * (pow_m1(p) * q.ln() - p.powf(gamma) / q)
    }
}

/// Focal loss on a logit `z` (`p = sigmoid(z)`); returns `(loss, d loss / d z)`.
pub fn focal_loss_logit(z: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let loss = focal_loss(p, target, alpha, gamma);
    let dp = focal_loss_grad_p(p, target, alpha, gamma);
    (loss, dp * p * (1.0 - p))
}

/// Mean absolute difference.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(dim_err("l1_loss", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// `sign(pred - target) / len`, with `sign(0) = 0`.
pub fn l1_loss_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != target.len() {
        return Err(dim_err("l1_loss_grad", pred.len(), target.len()));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}
