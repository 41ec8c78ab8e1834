use serde::{Deserialize, Serialize};

use super::{HierError, PriorSpec};
use crate::numeric::normal_quantile;

/// `tau` such that 95% of hospital odds ratios span a factor of `a`:
/// `exp(2 * 1.96 * tau) = a`.
pub fn elicit_tau_from_odds_range(a: f64) -> Result<f64, HierError> {
    if !(a > 1.0) || !a.is_finite() {
        return Err(HierError::BadRange(a));
    }
    Ok(a.ln() / 3.92)
}

/// Half-normal prior whose 95th percentile is `tau95`. The variance
/// parameter is `(tau95 / z_0.975)^2` with the exact normal quantile.
pub fn elicit_half_normal_from_upper(tau95: f64) -> PriorSpec {
    let z = normal_quantile(0.975);
    PriorSpec::HalfNormalOnSd { variance_param: (tau95 / z).powi(2) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseMedian {
    /// Median of `|N(0, 2 tau^2)|`: `sqrt(2) * Phi^-1(0.75) * tau`.
    #[default]
    Exact,
    /// The published constant `1.09 * tau`.
    Published,
}

/// Median absolute difference between two hospital intercepts.
pub fn pairwise_diff_median(tau: f64, rule: PairwiseMedian) -> f64 {
    match rule {
        PairwiseMedian::Exact => std::f64::consts::SQRT_2 * normal_quantile(0.75) * tau,
        PairwiseMedian::Published => 1.09 * tau,
    }
}
