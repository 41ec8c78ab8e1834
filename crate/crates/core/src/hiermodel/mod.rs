//! Random-intercept logistic model for hospital outcomes.
//!
//! `Y_ij ~ Bern(p_ij)`, `logit p_ij = b0_i + b1' x_ij`, `b0_i ~ N(mu, tau^2)`
//! with vague normal priors on `mu` and every slope and a choice of
//! hyperprior for the between-hospital spread `tau`.

mod elicit;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

pub use elicit::{elicit_half_normal_from_upper, elicit_tau_from_odds_range, pairwise_diff_median, PairwiseMedian};

use crate::numeric::{bernoulli_logit_ll, expit, normal_log_density};
use crate::registry::{Cohort, N_COVARIATES};
use crate::scalar::Real;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HierError {
    #[error("odds-ratio range must exceed 1, got {0}")]
    BadRange(f64),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("parameter dimensions do not match the data: {0}")]
    DimensionMismatch(String),
}

/// Hyperprior on the between-hospital standard deviation `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    /// `tau^-2 ~ Gamma(shape, rate)`.
    GammaOnPrecision { shape: f64, rate: f64 },
    /// `tau ~ Uniform(lo, hi)`.
    UniformOnSd { lo: f64, hi: f64 },
    /// `tau ~ |N(0, variance_param)|`.
    HalfNormalOnSd { variance_param: f64 },
    /// `tau` held at a known value.
    Fixed { tau: f64 },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), HierError> {
        let ok = match *self {
            PriorSpec::GammaOnPrecision { shape, rate } => shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite(),
            PriorSpec::UniformOnSd { lo, hi } => lo >= 0.0 && lo < hi && hi.is_finite(),
            PriorSpec::HalfNormalOnSd { variance_param } => variance_param > 0.0 && variance_param.is_finite(),
            PriorSpec::Fixed { tau } => tau >= 0.0 && tau.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(HierError::InvalidPrior(self.label()))
        }
    }

    /// Short human-readable name, e.g. `Gamma(0.001, 0.001)`.
    pub fn label(&self) -> String {
        match *self {
            PriorSpec::GammaOnPrecision { shape, rate } => format!("Gamma({shape}, {rate})"),
            PriorSpec::UniformOnSd { lo, hi } => format!("Unif({lo}, {hi})"),
            PriorSpec::HalfNormalOnSd { variance_param } => format!("half-Normal({variance_param:.2})"),
            PriorSpec::Fixed { tau } => format!("Fixed({tau})"),
        }
    }

    pub fn fixed_tau(&self) -> Option<f64> {
        match *self {
            PriorSpec::Fixed { tau } => Some(tau),
            _ => None,
        }
    }

    /// The three hyperpriors of the sensitivity analysis.
    pub fn sensitivity_defaults() -> Vec<PriorSpec> {
        vec![
            PriorSpec::GammaOnPrecision { shape: 0.001, rate: 0.001 },
            PriorSpec::UniformOnSd { lo: 0.0, hi: 1.5 },
            elicit_half_normal_from_upper(1.0),
        ]
    }

    /// Log prior density of `tau^2` (density with respect to `tau^2`) and its
    /// derivative. `None` outside the support. Zero for a fixed `tau`.
    pub fn log_density_tau2(&self, tau2: f64) -> Option<(f64, f64)> {
        if !(tau2 > 0.0) && self.fixed_tau().is_none() {
            return None;
        }
        match *self {
            PriorSpec::GammaOnPrecision { shape, rate } => {
                let lp = shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * tau2.ln() - rate / tau2;
                Some((lp, -(shape + 1.0) / tau2 + rate / (tau2 * tau2)))
            }
            PriorSpec::UniformOnSd { lo, hi } => {
                let tau = tau2.sqrt();
                if tau < lo || tau > hi {
                    return None;
                }
                Some((-(hi - lo).ln() - std::f64::consts::LN_2 - 0.5 * tau2.ln(), -0.5 / tau2))
            }
            PriorSpec::HalfNormalOnSd { variance_param } => {
                let v = variance_param;
                let lp = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - tau2 / (2.0 * v) - 0.5 * tau2.ln();
                Some((lp, -0.5 / v - 0.5 / tau2))
            }
            PriorSpec::Fixed { .. } => Some((0.0, 0.0)),
        }
    }
}

/// Full model specification; serializable as the JSON run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierSpec {
    pub prior: PriorSpec,
    #[serde(default = "vague_variance")]
    pub mu_prior_variance: f64,
    #[serde(default = "vague_variance")]
    pub beta_prior_variance: f64,
    /// Center and scale `yrs_over_65` inside the sampler; draws are reported
    /// on the original scale.
    #[serde(default)]
    pub standardize_age: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn vague_variance() -> f64 {
    1000.0
}

impl HierSpec {
    pub fn new(prior: PriorSpec) -> Self {
        HierSpec { prior, mu_prior_variance: 1000.0, beta_prior_variance: 1000.0, standardize_age: false, seed: None }
    }

    pub fn validate(&self) -> Result<(), HierError> {
        self.prior.validate()?;
        for (name, v) in [("mu_prior_variance", self.mu_prior_variance), ("beta_prior_variance", self.beta_prior_variance)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HierError::InvalidPrior(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// `tau = 0` collapses every hospital intercept onto `mu`.
    pub fn collapsed(&self) -> bool {
        self.prior.fixed_tau() == Some(0.0)
    }
}

impl Default for HierSpec {
    fn default() -> Self {
        HierSpec::new(PriorSpec::GammaOnPrecision { shape: 0.001, rate: 0.001 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierParams<S> {
    pub mu: S,
    pub tau2: S,
    pub beta1: Vec<S>,
    pub beta0: Vec<S>,
}

impl<S: Real> HierParams<S> {
    /// Hospital intercept actually used in the likelihood.
    pub fn intercept(&self, spec: &HierSpec, hospital: usize) -> S {
        if spec.collapsed() {
            self.mu
        } else {
            self.beta0[hospital]
        }
    }
}

/// Cohort converted once to the scalar type of the evaluation.
#[derive(Debug, Clone)]
pub struct HierData<S> {
    pub n_hospitals: usize,
    pub hospital: Vec<usize>,
    pub x: Vec<[S; N_COVARIATES]>,
    pub y: Vec<bool>,
}

impl<S: Real> HierData<S> {
    pub fn from_cohort(cohort: &Cohort) -> Self {
        HierData {
            n_hospitals: cohort.n_hospitals(),
            hospital: cohort.hospital_of().to_vec(),
            x: cohort.designs().iter().map(|d| d.0.map(S::lit)).collect(),
            y: cohort.outcomes(),
        }
    }

    fn check(&self, params: &HierParams<S>) -> Result<(), HierError> {
        if params.beta1.len() != N_COVARIATES || params.beta0.len() != self.n_hospitals {
            return Err(HierError::DimensionMismatch(format!(
                "beta1 {} (want {N_COVARIATES}), beta0 {} (want {})",
                params.beta1.len(),
                params.beta0.len(),
                self.n_hospitals
            )));
        }
        Ok(())
    }
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&u, &v)| u * v).sum()
}

/// Log joint density of data and parameters with every term normalized.
/// The hyperparameter enters as `tau^2`; out-of-support values give `-inf`.
pub fn log_posterior<S: Real>(params: &HierParams<S>, spec: &HierSpec, data: &HierData<S>) -> Result<S, HierError> {
    data.check(params)?;
    Ok(log_posterior_parts(params, spec, data).0)
}

/// Convenience wrapper converting the cohort on every call.
pub fn log_posterior_cohort(params: &HierParams<f64>, spec: &HierSpec, cohort: &Cohort) -> Result<f64, HierError> {
    log_posterior(params, spec, &HierData::from_cohort(cohort))
}

/// Gradient of [`log_posterior`] in the same layout as the parameters.
/// `tau2` and `beta0` components are zero where they are not free
/// (fixed `tau`; `beta0` when `tau = 0`).
pub fn log_posterior_gradient<S: Real>(
    params: &HierParams<S>,
    spec: &HierSpec,
    data: &HierData<S>,
) -> Result<HierParams<S>, HierError> {
    data.check(params)?;
    Ok(log_posterior_parts(params, spec, data).1)
}

fn tau2_of<S: Real>(params: &HierParams<S>, spec: &HierSpec) -> S {
    match spec.prior.fixed_tau() {
        Some(t) => S::lit(t * t),
        None => params.tau2,
    }
}

fn log_posterior_parts<S: Real>(params: &HierParams<S>, spec: &HierSpec, data: &HierData<S>) -> (S, HierParams<S>) {
    let mut grad = HierParams {
        mu: S::zero(),
        tau2: S::zero(),
        beta1: vec![S::zero(); N_COVARIATES],
        beta0: vec![S::zero(); data.n_hospitals],
    };
    let tau2 = tau2_of(params, spec);
    let prior = match spec.prior.log_density_tau2(tau2.as_f64()) {
        Some(p) => p,
        None => return (S::neg_infinity(), grad),
    };
    let collapsed = spec.collapsed();

    let mut lp = S::lit(prior.0);
    grad.tau2 = if spec.prior.fixed_tau().is_some() { S::zero() } else { S::lit(prior.1) };

    let vm = S::lit(spec.mu_prior_variance);
    lp += normal_log_density(params.mu, S::zero(), vm);
    grad.mu -= params.mu / vm;
    let vb = S::lit(spec.beta_prior_variance);
    for (k, &b) in params.beta1.iter().enumerate() {
        lp += normal_log_density(b, S::zero(), vb);
        grad.beta1[k] -= b / vb;
    }

    if !collapsed {
        for (i, &b0) in params.beta0.iter().enumerate() {
            let d = b0 - params.mu;
            lp += normal_log_density(b0, params.mu, tau2);
            grad.beta0[i] -= d / tau2;
            grad.mu += d / tau2;
            if spec.prior.fixed_tau().is_none() {
                grad.tau2 += -S::half() / tau2 + S::half() * d * d / (tau2 * tau2);
            }
        }
    }

    for ((x, &y), &h) in data.x.iter().zip(&data.y).zip(&data.hospital) {
        let eta = params.intercept(spec, h) + dot(x, &params.beta1);
        lp += bernoulli_logit_ll(y, eta);
        let r = if y { S::one() } else { S::zero() } - expit(eta);
        if collapsed {
            grad.mu += r;
        } else {
            grad.beta0[h] += r;
        }
        for k in 0..N_COVARIATES {
            grad.beta1[k] += r * x[k];
        }
    }
    (lp, grad)
}
