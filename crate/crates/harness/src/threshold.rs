//! Threshold policies: a fixed ε, an empirical quantile of the discrepancies
//! seen so far, or a Gaussian threshold.

use gpabc_core::Threshold;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed { eps: f64 },
    Quantile { q: f64 },
    Gaussian { mean: f64, var: f64 },
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::Fixed { eps } if !eps.is_finite() => {
                Err(HarnessError::Config(format!("epsilon must be finite, got {eps}")))
            }
            ThresholdPolicy::Quantile { q } if !(q > 0.0 && q < 1.0) => {
                Err(HarnessError::Config(format!("threshold quantile must lie in (0, 1), got {q}")))
            }
            ThresholdPolicy::Gaussian { mean, var } if !(mean.is_finite() && var > 0.0 && var.is_finite()) => {
                Err(HarnessError::Config(format!("gaussian threshold needs finite mean and var > 0, got {mean}, {var}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_fixed(&self) -> bool {
        !matches!(self, ThresholdPolicy::Quantile { .. })
    }
}

/// Type-7 empirical quantile: linear interpolation between order statistics
/// at position `(n - 1) q`.
pub fn empirical_quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of an empty list");
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// The threshold to use given every discrepancy observed so far.
pub fn adapt_threshold(discrepancies: &[f64], policy: &ThresholdPolicy) -> Threshold {
    match *policy {
        ThresholdPolicy::Fixed { eps } => Threshold::uniform(eps),
        ThresholdPolicy::Quantile { q } => Threshold::uniform(empirical_quantile(discrepancies, q)),
        ThresholdPolicy::Gaussian { mean, var } => Threshold::Gaussian { mean, var },
    }
}

/// The ε column written to traces; the mean for a Gaussian threshold.
pub fn threshold_level(t: &Threshold) -> f64 {
    match *t {
        Threshold::Uniform { eps } => eps,
        Threshold::Gaussian { mean, .. } => mean,
    }
}
