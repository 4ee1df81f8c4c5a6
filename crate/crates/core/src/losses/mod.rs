//! Training losses, each returning its value together with the analytic
//! gradient with respect to the new (query) features.
//!
//! Old features, galleries and the frozen old classifier are always treated
//! as constants.

mod compat;
mod id;
mod smooth_ap;
mod triplet;

pub use compat::{influence_loss, l2_compat_loss, median_pairwise_distance, mmd_loss, Bandwidth};
pub use id::{id_loss, log_softmax_rows, softmax_rows};
pub use smooth_ap::{smooth_ap_loss, smooth_ap_loss_with_constants, SmoothApOutput};
pub use triplet::hard_triplet_loss;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default ranking-sigmoid temperature.
pub const DEFAULT_TAU: f64 = 0.01;
/// Default compression anneal for supervised settings.
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Overflow-safe logistic function.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Temperature of the sigmoid that relaxes the ranking indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SigmoidParams {
    pub tau: f64,
}

impl SigmoidParams {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self { tau })
        } else {
            Err(Error::InvalidSpec(format!(
                "tau must be positive, got {tau}"
            )))
        }
    }

    /// Derivative of [`sigmoid_tau`] with respect to `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        let s = sigmoid_tau(x, *self);
        s * (1.0 - s) / self.tau
    }
}

impl Default for SigmoidParams {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

/// `1 / (1 + exp(-x / tau))`, saturating to 0 or 1 without NaN.
pub fn sigmoid_tau(x: f64, p: SigmoidParams) -> f64 {
    logistic(x / p.tau)
}

/// Which triplet terms receive the reactivation shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgrScope {
    /// Only `d_nj` terms against negatives.
    NegativesOnly,
    /// Both `d_pj` and `d_nj`.
    #[default]
    AllTerms,
}

/// Dynamic gradient reactivation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgrParams {
    pub alpha: f64,
    pub enabled: bool,
    #[serde(default)]
    pub scope: DgrScope,
}

impl DgrParams {
    pub fn new(alpha: f64, enabled: bool) -> Result<Self> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(Self {
                alpha,
                enabled,
                scope: DgrScope::AllTerms,
            })
        } else {
            Err(Error::InvalidSpec(format!(
                "alpha must be positive, got {alpha}"
            )))
        }
    }

    pub fn disabled() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            enabled: false,
            scope: DgrScope::AllTerms,
        }
    }

    pub fn with_enabled(self, enabled: bool) -> Self {
        Self { enabled, ..self }
    }
}

impl Default for DgrParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            enabled: true,
            scope: DgrScope::AllTerms,
        }
    }
}

/// Reactivation constant `c = (σ(d/α) − 0.5) − d`.
///
/// The shifted term `d + c` lies in (−0.5, 0.5). The constant is a property
/// of the forward pass only; gradients treat it as fixed.
pub fn dgr_constant(d: f64, g: DgrParams) -> f64 {
    (logistic(d / g.alpha) - 0.5) - d
}

/// Raw `d_nj` values seen in one loss evaluation and their shifted versions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletTerms {
    pub values: Vec<f64>,
    pub shifted_values: Vec<f64>,
}

impl TripletTerms {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn extend(&mut self, other: &TripletTerms) {
        self.values.extend_from_slice(&other.values);
        self.shifted_values.extend_from_slice(&other.shifted_values);
    }
}

/// Loss values and query gradient of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Compatibility term: smoothed-mAP loss for RBCL, otherwise the
    /// selected baseline's value (0 when training without compatibility).
    pub l_m: f64,
    pub l_tri: f64,
    pub l_id: f64,
    pub l_total: f64,
    pub grad_query: Array2<f64>,
    pub terms: TripletTerms,
}

impl LossReport {
    pub fn new(
        l_m: f64,
        l_tri: f64,
        l_id: f64,
        grad_query: Array2<f64>,
        terms: TripletTerms,
    ) -> Self {
        Self {
            l_m,
            l_tri,
            l_id,
            l_total: l_m + l_tri + l_id,
            grad_query,
            terms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_examples() {
        for tau in [1e-4, 0.01, 1.0, 7.0] {
            assert_eq!(sigmoid_tau(0.0, SigmoidParams::new(tau).unwrap()), 0.5);
        }
        let one = SigmoidParams::new(1.0).unwrap();
        // 1 / (1 + e^-0.8)
        assert!((sigmoid_tau(0.8, one) - 0.6899745).abs() < 1e-6);
        let sharp = SigmoidParams::new(0.01).unwrap();
        assert!(sigmoid_tau(-0.8, sharp) <= 1e-30);
        assert_eq!(sigmoid_tau(1e6, sharp), 1.0);
        assert_eq!(sigmoid_tau(-1e6, sharp), 0.0);
        assert!(SigmoidParams::new(0.0).is_err());
        assert!(SigmoidParams::new(-1.0).is_err());
    }

    #[test]
    fn dgr_examples() {
        let g = DgrParams::new(0.5, true).unwrap();
        assert_eq!(dgr_constant(0.0, g), 0.0);
        for alpha in [0.1, 0.3, 2.0] {
            assert_eq!(dgr_constant(0.0, DgrParams::new(alpha, true).unwrap()), 0.0);
        }
        let c = dgr_constant(2.0, g);
        assert!((c - -1.5179862).abs() < 1e-6);
        assert!((2.0 + c - 0.4820138).abs() < 1e-6);
        let c = dgr_constant(-3.0, g);
        assert!((c - 2.5024726).abs() < 1e-6);
        assert!((-3.0 + c - -0.4975274).abs() < 1e-6);
        assert!(DgrParams::new(0.0, true).is_err());
    }

    #[test]
    fn report_total_is_sum() {
        let r = LossReport::new(
            0.25,
            0.125,
            1.5,
            Array2::zeros((1, 1)),
            TripletTerms::default(),
        );
        assert_eq!(r.l_total, 0.25 + 0.125 + 1.5);
    }
}
