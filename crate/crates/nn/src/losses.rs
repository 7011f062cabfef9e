//! Slice-level losses returning `(loss, dloss/dprediction)`.

use crate::error::{NnError, Result};
use crate::graph::PROB_CLAMP;

fn check_len(op: &'static str, pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::ShapeMismatch {
            op,
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("mse", pred, target)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// `-mean[t ln p + (1 - t) ln(1 - p)]` with `p` clamped into
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`. The gradient is zero where the clamp is
/// active.
pub fn binary_log_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("binary_log_loss", pred, target)?;
    let n = pred.len() as f64;
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let pc = p.clamp(lo, hi);
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            if p < lo || p > hi {
                0.0
            } else {
                (-t / pc + (1.0 - t) / (1.0 - pc)) / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}
