use ndarray::{Array2, Axis};

use crate::{Error, Result};

/// Row-wise log-softmax via log-sum-exp.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv(f64::exp)
}

/// Label-smoothed cross-entropy, averaged over rows.
///
/// The target puts `1 − ε + ε/C` on the true class and `ε/C` elsewhere.
/// Returns the loss and its gradient with respect to the logits.
pub fn id_loss(logits: &Array2<f64>, labels: &[usize], epsilon: f64) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if c < 2 {
        return Err(Error::DimensionMismatch(format!(
            "ID loss needs ≥ 2 classes, got {c}"
        )));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: (n, c),
            got: (labels.len(), c),
        });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidSpec(format!(
            "label smoothing {epsilon} outside [0, 1)"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }

    let logp = log_softmax_rows(logits);
    let off = epsilon / c as f64;
    let on = 1.0 - epsilon + off;
    let mut loss = 0.0;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..c {
            let target = if k == y { on } else { off };
            if target > 0.0 {
                loss -= target * logp[[i, k]];
            }
            grad[[i, k]] -= target;
        }
    }
    let inv = 1.0 / n as f64;
    grad.mapv_inplace(|v| v * inv);
    Ok((loss * inv, grad))
}
