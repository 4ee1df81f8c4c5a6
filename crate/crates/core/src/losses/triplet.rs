use ndarray::{Array1, Array2};

use crate::featurespace::FeatureSet;
use crate::{Error, Result};

/// Batch-hard triplet loss with Euclidean distances.
///
/// Each anchor uses its farthest positive and nearest negative; ties go to the
/// lowest row index. Returns the mean hinge over anchors and the subgradient
/// with respect to every batch row. A zero distance contributes a zero
/// subgradient.
pub fn hard_triplet_loss(batch: &FeatureSet, margin: f64) -> Result<(f64, Array2<f64>)> {
    let x = batch.features();
    let labels = batch.labels();
    let n = batch.len();

    let mut dist = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        for b in (a + 1)..n {
            let diff = &x.row(a) - &x.row(b);
            let d = diff.dot(&diff).sqrt();
            dist[[a, b]] = d;
            dist[[b, a]] = d;
        }
    }

    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(x.dim());
    for a in 0..n {
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for b in 0..n {
            if b == a {
                continue;
            }
            if labels[b] == labels[a] {
                if hardest_pos.is_none_or(|p| dist[[a, b]] > dist[[a, p]]) {
                    hardest_pos = Some(b);
                }
            } else if hardest_neg.is_none_or(|q| dist[[a, b]] < dist[[a, q]]) {
                hardest_neg = Some(b);
            }
        }
        let p = hardest_pos.ok_or_else(|| {
            Error::DegenerateBatch(format!("row {a} (class {}) has no positive", labels[a]))
        })?;
        let q = hardest_neg
            .ok_or_else(|| Error::DegenerateBatch("batch contains a single class".into()))?;

        let hinge = margin + dist[[a, p]] - dist[[a, q]];
        if hinge > 0.0 {
            loss += hinge;
            let towards_p = unit(&(&x.row(a) - &x.row(p)), dist[[a, p]]);
            let towards_q = unit(&(&x.row(a) - &x.row(q)), dist[[a, q]]);
            let mut ga = grad.row_mut(a);
            ga += &towards_p;
            ga -= &towards_q;
            let mut gp = grad.row_mut(p);
            gp -= &towards_p;
            let mut gq = grad.row_mut(q);
            gq += &towards_q;
        }
    }
    let inv = 1.0 / n as f64;
    grad.mapv_inplace(|v| v * inv);
    Ok((loss * inv, grad))
}

fn unit(v: &Array1<f64>, norm: f64) -> Array1<f64> {
    if norm > 0.0 {
        v / norm
    } else {
        Array1::zeros(v.len())
    }
}
