//! Smoothed mean Average Precision between new-model queries and an
//! old-model gallery.
//!
//! For query `i` with gallery positives `P` and negatives `N`:
//!
//! ```text
//! AP_i = 1/|P| Σ_{j∈P} (1 + Σ_{p∈P\j} σ(d_pj)) / (1 + Σ_{p∈P\j} σ(d_pj) + Σ_{n∈N} σ(d_nj))
//! d_kj = s_ik − s_ij,   σ(x) = 1 / (1 + exp(−x/τ)),   L_m = 1 − mean_i AP_i
//! ```
//!
//! With reactivation enabled every `d` is replaced by `d + c` where `c` is a
//! forward-only constant; the backward pass differentiates `σ` at the shifted
//! point and passes `∂(d + c)/∂d = 1`.

use ndarray::{Array1, Array2, Axis};

use super::{dgr_constant, sigmoid_tau, DgrParams, DgrScope, SigmoidParams, TripletTerms};
use crate::featurespace::{normalized_rows, FeatureSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothApOutput {
    pub l_m: f64,
    /// Smoothed AP of every query.
    pub ap: Vec<f64>,
    pub grad_query: Array2<f64>,
    pub terms: TripletTerms,
    /// Reactivation constant of every `(i, j, k)` term in evaluation order:
    /// queries, then positives `j` in gallery order, then all gallery
    /// entries `k ≠ j`. All zero when reactivation is off.
    pub constants: Vec<f64>,
}

enum Shift<'a> {
    Dynamic(DgrParams),
    Frozen(&'a [f64]),
}

/// Smoothed-mAP loss, optionally with dynamic gradient reactivation.
pub fn smooth_ap_loss(
    query: &FeatureSet,
    gallery: &FeatureSet,
    p: SigmoidParams,
    g: DgrParams,
) -> Result<SmoothApOutput> {
    evaluate(query, gallery, p, Shift::Dynamic(g))
}

/// Same loss with externally supplied shift constants (as returned in
/// [`SmoothApOutput::constants`]). Used to probe the reactivated loss with
/// the constants held fixed.
pub fn smooth_ap_loss_with_constants(
    query: &FeatureSet,
    gallery: &FeatureSet,
    p: SigmoidParams,
    constants: &[f64],
) -> Result<SmoothApOutput> {
    evaluate(query, gallery, p, Shift::Frozen(constants))
}

fn evaluate(
    query: &FeatureSet,
    gallery: &FeatureSet,
    p: SigmoidParams,
    shift: Shift<'_>,
) -> Result<SmoothApOutput> {
    if query.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} vs gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let (qn, qnorm) = normalized_rows(query.features())?;
    let (gn, _) = normalized_rows(gallery.features())?;
    let q_count = query.len();
    let g_count = gallery.len();
    let glabels = gallery.labels();

    let mut frozen_pos = 0usize;
    let mut constants = Vec::new();
    let mut terms = TripletTerms::default();
    let mut aps = Vec::with_capacity(q_count);
    let mut grad = Array2::zeros(query.features().dim());

    for i in 0..q_count {
        let label = query.labels()[i];
        let qi = qn.row(i);
        let sims: Vec<f64> = gn.axis_iter(Axis(0)).map(|gj| qi.dot(&gj)).collect();
        let positives: Vec<usize> = (0..g_count).filter(|&j| glabels[j] == label).collect();
        if positives.is_empty() {
            return Err(Error::NoPositive(i));
        }
        let inv_p = 1.0 / positives.len() as f64;

        let mut ap = 0.0;
        // ∂AP_i/∂s_ik
        let mut d_sim = vec![0.0; g_count];
        let mut shifted = vec![0.0; g_count];
        let mut slope = vec![0.0; g_count];
        for &j in &positives {
            let mut pos_sum = 0.0;
            let mut neg_sum = 0.0;
            for k in 0..g_count {
                if k == j {
                    continue;
                }
                let is_pos = glabels[k] == label;
                let d = sims[k] - sims[j];
                let c = match shift {
                    Shift::Dynamic(g)
                        if g.enabled && (!is_pos || g.scope == DgrScope::AllTerms) =>
                    {
                        dgr_constant(d, g)
                    }
                    Shift::Dynamic(_) => 0.0,
                    Shift::Frozen(cs) => {
                        let c = *cs.get(frozen_pos).ok_or_else(|| {
                            Error::DimensionMismatch("too few reactivation constants".into())
                        })?;
                        frozen_pos += 1;
                        c
                    }
                };
                constants.push(c);
                let t = d + c;
                let s = sigmoid_tau(t, p);
                shifted[k] = t;
                slope[k] = s * (1.0 - s) / p.tau;
                if is_pos {
                    pos_sum += s;
                } else {
                    neg_sum += s;
                    terms.values.push(d);
                    terms.shifted_values.push(t);
                }
            }
            let num = 1.0 + pos_sum;
            let den = num + neg_sum;
            ap += inv_p * num / den;

            let w_pos = inv_p * neg_sum / (den * den);
            let w_neg = -inv_p * num / (den * den);
            for k in 0..g_count {
                if k == j {
                    continue;
                }
                let w = if glabels[k] == label { w_pos } else { w_neg } * slope[k];
                d_sim[k] += w;
                d_sim[j] -= w;
            }
        }
        aps.push(ap);

        // L_m = 1 − mean AP, and ∂s_ik/∂q_i = (ĝ_k − s_ik q̂_i) / ‖q_i‖
        let scale = -1.0 / (q_count as f64 * qnorm[i]);
        let mut gi = Array1::<f64>::zeros(query.dim());
        let mut radial = 0.0;
        for k in 0..g_count {
            if d_sim[k] != 0.0 {
                gi.scaled_add(d_sim[k], &gn.row(k));
                radial += d_sim[k] * sims[k];
            }
        }
        gi.scaled_add(-radial, &qi);
        grad.row_mut(i).assign(&(gi * scale));
    }

    if let Shift::Frozen(cs) = shift {
        if frozen_pos != cs.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {frozen_pos} reactivation constants, got {}",
                cs.len()
            )));
        }
    }

    let l_m = 1.0 - aps.iter().sum::<f64>() / q_count as f64;
    Ok(SmoothApOutput {
        l_m,
        ap: aps,
        grad_query: grad,
        terms,
        constants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurespace::Source;
    use crate::losses::logistic;
    use ndarray::array;

    fn set(rows: Array2<f64>, labels: &[u32]) -> FeatureSet {
        let ids = (0..labels.len() as u64).collect();
        FeatureSet::new(rows, labels.to_vec(), ids, Source::default()).unwrap()
    }

    /// Unit vector in the plane at cosine `s` from (1, 0).
    fn at_cos(s: f64) -> [f64; 2] {
        [s, (1.0 - s * s).sqrt()]
    }

    #[test]
    fn single_positive_gives_perfect_ap() {
        let q = set(array![[1.0, 0.2]], &[0]);
        let g = set(array![[-0.3, 1.0]], &[0]);
        for tau in [1e-4, 0.01, 1.0] {
            let out = smooth_ap_loss(
                &q,
                &g,
                SigmoidParams::new(tau).unwrap(),
                DgrParams::disabled(),
            )
            .unwrap();
            assert_eq!(out.ap, vec![1.0]);
            assert_eq!(out.l_m, 0.0);
            assert!(out.grad_query.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_positive_one_negative() {
        let q = set(array![[1.0, 0.0]], &[0]);
        let p = at_cos(0.9);
        let n = at_cos(0.1);
        let g = set(array![[p[0], p[1]], [n[0], n[1]]], &[0, 1]);
        let out = smooth_ap_loss(
            &q,
            &g,
            SigmoidParams::new(1.0).unwrap(),
            DgrParams::disabled(),
        )
        .unwrap();
        // AP = 1 / (1 + σ(0.1 − 0.9))
        let oracle = 1.0 / (1.0 + logistic(-0.8));
        assert!((oracle - 0.763336).abs() < 1e-5);
        assert!((out.ap[0] - oracle).abs() < 1e-12);
        assert!((out.l_m - 0.236664).abs() < 1e-5);
        assert_eq!(out.terms.values.len(), 1);
        assert!((out.terms.values[0] - -0.8).abs() < 1e-12);
    }

    #[test]
    fn sharp_limit_matches_exact_ap() {
        // similarity order: pos, neg, pos, neg
        let sims = [0.9, 0.6, 0.3, 0.0];
        let rows: Vec<f64> = sims.iter().flat_map(|&s| at_cos(s)).collect();
        let g = set(Array2::from_shape_vec((4, 2), rows).unwrap(), &[0, 1, 0, 2]);
        let q = set(array![[1.0, 0.0]], &[0]);
        let out = smooth_ap_loss(
            &q,
            &g,
            SigmoidParams::new(1e-4).unwrap(),
            DgrParams::disabled(),
        )
        .unwrap();
        assert!((out.l_m - (1.0 - (1.0 + 2.0 / 3.0) / 2.0)).abs() < 5e-3);
    }

    #[test]
    fn missing_positive_is_an_error() {
        let q = set(array![[1.0, 0.0]], &[5]);
        let g = set(array![[1.0, 0.0]], &[0]);
        assert!(matches!(
            smooth_ap_loss(&q, &g, SigmoidParams::default(), DgrParams::disabled()),
            Err(Error::NoPositive(0))
        ));
    }

    #[test]
    fn frozen_constants_reproduce_dynamic_pass() {
        let q = set(array![[1.0, 0.3, -0.2], [0.1, 1.0, 0.4]], &[0, 1]);
        let g = set(
            array![
                [0.9, 0.1, 0.0],
                [0.2, 0.8, 0.1],
                [0.5, 0.5, 0.5],
                [1.0, -0.2, 0.3]
            ],
            &[0, 1, 2, 0],
        );
        let p = SigmoidParams::new(0.1).unwrap();
        let dynamic = smooth_ap_loss(&q, &g, p, DgrParams::default()).unwrap();
        let frozen = smooth_ap_loss_with_constants(&q, &g, p, &dynamic.constants).unwrap();
        assert_eq!(dynamic, frozen);
        assert!(smooth_ap_loss_with_constants(&q, &g, p, &dynamic.constants[1..]).is_err());
    }

    #[test]
    fn negatives_only_scope_leaves_positive_terms() {
        let q = set(array![[1.0, 0.0]], &[0]);
        let g = set(array![[0.9, 0.2], [0.7, 0.7], [0.1, 1.0]], &[0, 0, 1]);
        let dgr = DgrParams {
            scope: DgrScope::NegativesOnly,
            ..DgrParams::default()
        };
        let out = smooth_ap_loss(&q, &g, SigmoidParams::new(0.1).unwrap(), dgr).unwrap();
        // j=0: k=1 (pos), k=2 (neg); j=1: k=0 (pos), k=2 (neg)
        assert_eq!(out.constants[0], 0.0);
        assert_ne!(out.constants[1], 0.0);
        assert_eq!(out.constants[2], 0.0);
        assert_ne!(out.constants[3], 0.0);
    }
}
