//! Link functions, exact binomial utilities and draw summaries.

use serde::{Deserialize, Serialize};
use statrs::function::beta::inv_beta_reg;
use statrs::function::erf::{erf, erfc_inv};
use statrs::function::gamma::ln_gamma;

use crate::scalar::Real;

/// Inverse logit, evaluated without overflow for large `|x|`.
#[inline]
pub fn expit<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub fn logit<S: Real>(p: S) -> S {
    (p / (S::one() - p)).ln()
}

/// `ln(1 + e^x)`.
#[inline]
pub fn log1pexp<S: Real>(x: S) -> S {
    if x > S::lit(35.0) {
        x
    } else if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of outcome `y` at log-odds `eta`.
#[inline]
pub fn bernoulli_logit_ll<S: Real>(y: bool, eta: S) -> S {
    if y {
        eta - log1pexp(eta)
    } else {
        -log1pexp(eta)
    }
}

/// Log density of `Normal(mean, variance)` at `x`.
#[inline]
pub fn normal_log_density<S: Real>(x: S, mean: S, variance: S) -> S {
    let d = x - mean;
    -S::half() * (S::ln_two_pi() + variance.ln() + d * d / variance)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "probability out of range: {p}");
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `ln P(X = k)` for `X ~ Bin(n, p)`.
pub fn binomial_ln_pmf(n: u64, p: f64, k: u64) -> f64 {
    assert!(k <= n, "k = {k} exceeds n = {n}");
    if p <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if p >= 1.0 {
        return if k == n { 0.0 } else { f64::NEG_INFINITY };
    }
    ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialTail {
    pub point: f64,
    pub upper: f64,
    pub lower: f64,
}

/// Point probability and both closed tails of `Bin(n, p)` at `k`,
/// summed term by term in log space.
pub fn binomial_point_and_tail(n: u64, p: f64, k: u64) -> BinomialTail {
    assert!(k <= n, "k = {k} exceeds n = {n}");
    assert!((0.0..=1.0).contains(&p), "p = {p} outside [0, 1]");
    let point = binomial_ln_pmf(n, p, k).exp();
    let upper = log_sum_exp((k..=n).map(|j| binomial_ln_pmf(n, p, j))).exp();
    let lower = log_sum_exp((0..=k).map(|j| binomial_ln_pmf(n, p, j))).exp();
    BinomialTail {
        point: point.clamp(0.0, 1.0),
        upper: upper.clamp(0.0, 1.0),
        lower: lower.clamp(0.0, 1.0),
    }
}

/// Exact (Clopper–Pearson) two-sided interval for a binomial proportion.
pub fn clopper_pearson(successes: u64, trials: u64, level: f64) -> (f64, f64) {
    assert!(trials > 0 && successes <= trials);
    let alpha = 1.0 - level;
    let x = successes as f64;
    let n = trials as f64;
    let lower = if successes == 0 {
        0.0
    } else {
        inv_beta_reg(x, n - x + 1.0, alpha / 2.0)
    };
    let upper = if successes == trials {
        1.0
    } else {
        inv_beta_reg(x + 1.0, n - x, 1.0 - alpha / 2.0)
    };
    (lower, upper)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (divisor `n - 1`).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Linear-interpolation quantile of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, median and central 95% interval of a draw series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary {
            mean: mean(values),
            median: quantile_sorted(&sorted, 0.5),
            lower: quantile_sorted(&sorted, 0.025),
            upper: quantile_sorted(&sorted, 0.975),
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Summary {
            mean: self.mean * factor,
            median: self.median * factor,
            lower: self.lower * factor,
            upper: self.upper * factor,
        }
    }
}
