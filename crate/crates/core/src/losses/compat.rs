//! Baseline compatibility losses between new features and their old
//! counterparts. Gradients are with respect to the new rows only.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{log_softmax_rows, softmax_rows};
use crate::featurespace::FeatureSet;
use crate::model::ClassifierHead;
use crate::{Error, Result};

/// Old rows reordered to match `new` by instance id.
fn aligned_old(new: &FeatureSet, old: &FeatureSet) -> Result<Array2<f64>> {
    if new.dim() != old.dim() {
        return Err(Error::DimensionMismatch(format!(
            "new dim {} vs old dim {}",
            new.dim(),
            old.dim()
        )));
    }
    let pos: HashMap<_, _> = old
        .instance_ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let rows = new
        .instance_ids()
        .iter()
        .map(|id| pos.get(id).copied().ok_or(Error::InstanceMismatch(*id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(old.features().select(Axis(0), &rows))
}

/// Mean squared Euclidean distance between aligned new and old features.
pub fn l2_compat_loss(new: &FeatureSet, old: &FeatureSet) -> Result<(f64, Array2<f64>)> {
    let target = aligned_old(new, old)?;
    let diff = new.features() - &target;
    let n = new.len() as f64;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// Kernel bandwidth for [`mmd_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled rows, 1.0 if that is zero.
    /// Treated as a constant by the gradient.
    #[default]
    Auto,
}

/// Median Euclidean distance over all distinct pairs of rows.
pub fn median_pairwise_distance(x: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in (a + 1)..n {
            let diff = &x.row(a) - &x.row(b);
            d.push(diff.dot(&diff).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Biased squared MMD with a single Gaussian kernel
/// `k(x, y) = exp(−‖x − y‖² / (2σ²))`.
pub fn mmd_loss(
    new: &FeatureSet,
    old: &FeatureSet,
    bandwidth: Bandwidth,
) -> Result<(f64, Array2<f64>)> {
    if new.dim() != old.dim() {
        return Err(Error::DimensionMismatch(format!(
            "new dim {} vs old dim {}",
            new.dim(),
            old.dim()
        )));
    }
    let x = new.features();
    let y = old.features();
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => {
            return Err(Error::InvalidSpec(format!(
                "bandwidth {s} must be positive"
            )))
        }
        Bandwidth::Auto => {
            let pooled =
                ndarray::concatenate(Axis(0), &[x.view(), y.view()]).expect("equal column counts");
            let m = median_pairwise_distance(&pooled);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let n = x.nrows() as f64;
    let m = y.nrows() as f64;

    let mut grad = Array2::<f64>::zeros(x.dim());
    let mut kxx = 0.0;
    for a in 0..x.nrows() {
        for b in 0..x.nrows() {
            let diff = &x.row(a) - &x.row(b);
            let k = (-diff.dot(&diff) * inv2s2).exp();
            kxx += k;
            // both (a, b) and (b, a) depend on x_a
            grad.row_mut(a)
                .scaled_add(-2.0 * k * 2.0 * inv2s2 / (n * n), &diff);
        }
    }
    let mut kyy = 0.0;
    for a in 0..y.nrows() {
        for b in 0..y.nrows() {
            let diff = &y.row(a) - &y.row(b);
            kyy += (-diff.dot(&diff) * inv2s2).exp();
        }
    }
    let mut kxy = 0.0;
    for a in 0..x.nrows() {
        for b in 0..y.nrows() {
            let diff = &x.row(a) - &y.row(b);
            let k = (-diff.dot(&diff) * inv2s2).exp();
            kxy += k;
            grad.row_mut(a)
                .scaled_add(2.0 * k * 2.0 * inv2s2 / (n * m), &diff);
        }
    }
    let value = kxx / (n * n) + kyy / (m * m) - 2.0 * kxy / (n * m);
    Ok((value, grad))
}

/// Distillation through the frozen old classifier: mean cross-entropy of
/// `softmax(head(new_i))` against the fixed target `softmax(head(old_i))`.
pub fn influence_loss(
    new: &FeatureSet,
    old: &FeatureSet,
    old_classifier: &ClassifierHead,
) -> Result<(f64, Array2<f64>)> {
    if old_classifier.num_classes() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "classifier has {} classes, need ≥ 2",
            old_classifier.num_classes()
        )));
    }
    if old_classifier.input_dim() != new.dim() {
        return Err(Error::DimensionMismatch(format!(
            "classifier input {} vs feature dim {}",
            old_classifier.input_dim(),
            new.dim()
        )));
    }
    let target_feats = aligned_old(new, old)?;
    let target = softmax_rows(&old_classifier.logits(&target_feats)?);
    let logp = log_softmax_rows(&old_classifier.logits(new.features())?);
    let n = new.len() as f64;
    let value = -(&target * &logp).sum() / n;
    let grad_logits = (logp.mapv(f64::exp) - &target) / n;
    Ok((value, old_classifier.backward_input(&grad_logits)))
}
