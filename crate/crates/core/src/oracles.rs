//! Independent reference computations for tests: brute-force mAP and
//! central finite-difference gradients.
//!
//! Nothing here calls into `eval`, `losses` or `featurespace` similarity
//! code; only the [`FeatureSet`] container is shared.

use ndarray::Array2;

use crate::featurespace::FeatureSet;
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// mAP by full sort of the gallery per query.
///
/// Ranking is descending cosine similarity with ties broken by ascending
/// gallery instance id.
pub fn brute_force_map(query: &FeatureSet, gallery: &FeatureSet) -> Result<f64> {
    let norms = |s: &FeatureSet| -> Result<Vec<f64>> {
        (0..s.len())
            .map(|i| {
                let n = s.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-12 {
                    Ok(n)
                } else {
                    Err(Error::ZeroNormRow(i))
                }
            })
            .collect()
    };
    let qn = norms(query)?;
    let gn = norms(gallery)?;
    let mut total = 0.0;
    for i in 0..query.len() {
        let label = query.labels()[i];
        let mut scored: Vec<(f64, u64, bool)> = (0..gallery.len())
            .map(|j| {
                let sim = query
                    .row(i)
                    .iter()
                    .zip(gallery.row(j).iter())
                    .map(|(a, b)| (a / qn[i]) * (b / gn[j]))
                    .sum::<f64>();
                (sim, gallery.instance_ids()[j], gallery.labels()[j] == label)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let relevant = scored.iter().filter(|s| s.2).count();
        if relevant == 0 {
            return Err(Error::MissingPositive(label));
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (rank, s) in scored.iter().enumerate() {
            if s.2 {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
            }
        }
        total += sum / relevant as f64;
    }
    Ok(total / query.len() as f64)
}

/// Central differences `(f(x + h e) − f(x − h e)) / 2h` for every entry.
pub fn finite_diff_grad<F>(f: F, at: &Array2<f64>, h: f64) -> Result<Array2<f64>>
where
    F: Fn(&Array2<f64>) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidSpec(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let mut probe = at.clone();
    let mut grad = Array2::zeros(at.dim());
    for idx in ndarray::indices(at.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let plus = f(&probe);
        probe[idx] = orig - h;
        let minus = f(&probe);
        probe[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite);
        }
        grad[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest entrywise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurespace::Source;
    use ndarray::array;

    #[test]
    fn quadratic_gradient() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let g = finite_diff_grad(|m| m.iter().map(|v| v * v).sum(), &x, DEFAULT_STEP).unwrap();
        for (a, b) in g.iter().zip(x.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-8);
        }
    }

    #[test]
    fn logistic_slope_at_zero() {
        let f = |m: &Array2<f64>| 1.0 / (1.0 + (-m[[0, 0]]).exp());
        let g = finite_diff_grad(f, &array![[0.0]], DEFAULT_STEP).unwrap();
        assert!((g[[0, 0]] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn constant_and_errors() {
        let g = finite_diff_grad(|_| 4.2, &array![[1.0, 2.0]], DEFAULT_STEP).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(matches!(
            finite_diff_grad(|_| f64::NAN, &array![[1.0]], DEFAULT_STEP),
            Err(Error::NonFinite)
        ));
        assert!(finite_diff_grad(|_| 0.0, &array![[1.0]], 1e-2).is_err());
    }

    fn set(rows: Array2<f64>, labels: &[u32], id0: u64) -> FeatureSet {
        let ids = (id0..id0 + labels.len() as u64).collect();
        FeatureSet::new(rows, labels.to_vec(), ids, Source::default()).unwrap()
    }

    #[test]
    fn brute_force_examples() {
        let q = set(array![[1.0, 0.0], [0.0, 1.0]], &[0, 1], 0);
        let g = set(array![[2.0, 0.0], [0.0, 3.0]], &[0, 1], 10);
        assert_eq!(brute_force_map(&q, &g).unwrap(), 1.0);

        // ranks: pos, neg, pos, neg
        let q = set(array![[1.0, 0.0]], &[0], 0);
        let g = set(
            array![[1.0, 0.0], [1.0, 0.3], [1.0, 0.6], [1.0, 0.9]],
            &[0, 1, 0, 2],
            10,
        );
        assert!((brute_force_map(&q, &g).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);

        let g = set(array![[1.0, 0.0]], &[3], 10);
        assert!(matches!(
            brute_force_map(&q, &g),
            Err(Error::MissingPositive(0))
        ));
    }
}
