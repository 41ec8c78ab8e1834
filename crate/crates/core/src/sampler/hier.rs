//! Sweep for the random-intercept logistic model.
//!
//! Update order within a sweep:
//! 1. each hospital intercept `beta0[i]` (scalar random walk);
//! 2. fixed effects: when `ChainConfig::joint_fixed_effects` is set, one
//!    joint proposal over (intercept level, active slopes); then each active
//!    slope (scalar random walk). The joint move carries the level along
//!    correlated slopes, the scalar ones mix the rare covariates;
//! 3. `mu` (scalar random walk);
//! 4. level shift of `mu` and every `beta0[i]` together (scalar mode only);
//! 5. `tau^2`: conjugate inverse-gamma draw under the Gamma-on-precision
//!    prior, random walk on `log tau` otherwise; skipped when `tau` is fixed;
//! 6. spread: `tau` and every deviation `beta0[i] - mu` rescaled by a common
//!    factor `exp(e)`, which moves along the funnel between the two.
//!
//! Hospitals are visited in id order whatever their order in the input.
//!
//! Per-row linear predictors and log-likelihood terms are cached so every
//! update only touches the rows it changes. Slopes of covariates that are
//! constant in the cohort are not identifiable next to the intercepts and are
//! held at zero.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{accept, run_chains, ChainConfig, ChainModel, PosteriorDraws, SamplerError, Tuner};
use crate::classical::fit_logistic_mle;
use crate::hiermodel::{HierSpec, PriorSpec};
use crate::linalg::{Cholesky, SquareMatrix};
use crate::numeric::{bernoulli_logit_ll, expit, logit, normal_log_density};
use crate::registry::{Cohort, HospitalId, COVARIATE_NAMES, N_COVARIATES};

const TAU_INIT: f64 = 0.1;

/// Column of `mu` in hierarchical draws.
pub const MU: usize = 0;
/// Column of `tau^2` in hierarchical draws.
pub const TAU2: usize = 1;

/// Column of slope `k` in hierarchical draws.
pub const fn beta1_index(k: usize) -> usize {
    2 + k
}

/// Column of hospital intercept `i` in hierarchical draws.
pub const fn beta0_index(i: usize) -> usize {
    2 + N_COVARIATES + i
}

#[derive(Debug, Clone)]
pub struct HierSampler {
    spec: HierSpec,
    /// Input order, used for output columns.
    hospital_ids: Vec<HospitalId>,
    /// Internal (id-sorted) position of each input hospital.
    to_internal: Vec<usize>,
    internal_ids: Vec<HospitalId>,
    y: Vec<bool>,
    ranges: Vec<Range<usize>>,
    /// Nonzero entries of each working-scale covariate column.
    cols: Vec<Vec<(u32, f64)>>,
    active: Vec<bool>,
    age_center: f64,
    age_scale: f64,
    init_mu: f64,
    init_beta1: [f64; N_COVARIATES],
    init_beta0: Vec<f64>,
    /// Cholesky factor of the working-scale MLE covariance over
    /// (intercept, active slopes).
    fixed_chol: SquareMatrix<f64>,
    fixed_sd: Vec<f64>,
    active_idx: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HierState {
    mu: f64,
    tau2: f64,
    beta1: [f64; N_COVARIATES],
    beta0: Vec<f64>,
    eta: Vec<f64>,
    ll: Vec<f64>,
    scratch: Vec<f64>,
    scratch_eta: Vec<f64>,
}

impl HierSampler {
    pub fn new(spec: &HierSpec, cohort: &Cohort) -> Result<Self, SamplerError> {
        spec.validate().map_err(|e| SamplerError::InvalidInput(e.to_string()))?;
        if cohort.is_empty() {
            return Err(SamplerError::InvalidInput("cohort is empty".into()));
        }
        let input = cohort;
        let canonical = input.canonical();
        let cohort = &canonical;
        let to_internal: Vec<usize> =
            input.hospital_ids().iter().map(|id| cohort.hospital_index(id).expect("same hospitals")).collect();
        let by_hospital = cohort.rows_by_hospital();
        let order: Vec<usize> = by_hospital.concat();
        let mut ranges = Vec::with_capacity(by_hospital.len());
        let mut start = 0;
        for rows in &by_hospital {
            ranges.push(start..start + rows.len());
            start += rows.len();
        }
        let designs = cohort.designs();
        let outcomes = cohort.outcomes();
        let y: Vec<bool> = order.iter().map(|&j| outcomes[j]).collect();
        let x: Vec<[f64; N_COVARIATES]> = order.iter().map(|&j| designs[j].0).collect();

        let active: Vec<bool> = (0..N_COVARIATES).map(|k| x.iter().any(|r| r[k] != x[0][k])).collect();
        let (age_center, age_scale) = if spec.standardize_age && active[0] {
            let ages: Vec<f64> = x.iter().map(|r| r[0]).collect();
            (crate::numeric::mean(&ages), crate::numeric::variance(&ages).sqrt())
        } else {
            (0.0, 1.0)
        };
        let cols: Vec<Vec<(u32, f64)>> = (0..N_COVARIATES)
            .map(|k| {
                if !active[k] {
                    return Vec::new();
                }
                x.iter()
                    .enumerate()
                    .filter_map(|(r, row)| {
                        let v = if k == 0 { (row[0] - age_center) / age_scale } else { row[k] };
                        (v != 0.0).then_some((r as u32, v))
                    })
                    .collect()
            })
            .collect();

        // starting point on the original scale
        let n = y.len();
        let deaths = y.iter().filter(|&&d| d).count();
        let fit = fit_logistic_mle::<f64>(cohort).ok();
        let (alpha0, alpha, cov) = match &fit {
            Some(f) => (f.intercept, f.slopes.clone(), f.covariance.clone()),
            None => {
                let p = (deaths as f64 + 0.5) / (n as f64 + 1.0);
                let mut cov = SquareMatrix::identity(N_COVARIATES + 1);
                for i in 0..=N_COVARIATES {
                    cov[(i, i)] = 0.01;
                }
                (logit(p), vec![0.0; N_COVARIATES], cov)
            }
        };
        let tau0 = initial_tau(spec);
        let pooled = (deaths as f64 + 0.5) / (n as f64 + 1.0);
        let init_beta0_orig: Vec<f64> = ranges
            .iter()
            .map(|r| {
                let ni = r.len() as f64;
                let di = y[r.clone()].iter().filter(|&&d| d).count() as f64;
                let ei: f64 = x[r.clone()]
                    .iter()
                    .map(|row| expit(alpha0 + row.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>()))
                    .sum();
                let offset = logit((di + 0.5) / (ni + 1.0)) - logit((ei + 0.5) / (ni + 1.0));
                let t2 = tau0 * tau0;
                let weight = t2 / (t2 + 1.0 / (ni * pooled * (1.0 - pooled)));
                alpha0 + weight * offset
            })
            .collect();

        // working scale: intercepts absorb the age centering, age slope is per sd
        let shift = alpha[0] * age_center;
        let mut init_beta1 = [0.0; N_COVARIATES];
        for k in 0..N_COVARIATES {
            if active[k] {
                init_beta1[k] = if k == 0 { alpha[0] * age_scale } else { alpha[k] };
            }
        }
        let active_idx: Vec<usize> = (0..N_COVARIATES).filter(|&k| active[k]).collect();
        let dim = active_idx.len() + 1;
        let full = |a: usize| if a == 0 { 0 } else { active_idx[a - 1] + 1 };
        let mut work_cov = SquareMatrix::zeros(dim);
        let transform = |v: &[f64]| -> Vec<f64> {
            // original (intercept, 18 slopes) -> working (intercept, active slopes)
            (0..dim)
                .map(|a| match full(a) {
                    0 => v[0] + age_center * v[1],
                    1 => age_scale * v[1],
                    f => v[f],
                })
                .collect()
        };
        let cols_t: Vec<Vec<f64>> = (0..=N_COVARIATES).map(|j| transform(cov.row(j))).collect();
        for a in 0..dim {
            let col: Vec<f64> = (0..=N_COVARIATES).map(|j| cols_t[j][a]).collect();
            let t = transform(&col);
            for b in 0..dim {
                work_cov[(a, b)] = t[b];
            }
        }
        let fixed_sd: Vec<f64> = (0..dim).map(|a| work_cov[(a, a)].max(0.0).sqrt()).collect();
        let fixed_chol = match Cholesky::new(&work_cov, 1e-12) {
            Some(c) => c.lower().clone(),
            None => {
                let mut m = SquareMatrix::zeros(dim);
                for a in 0..dim {
                    m[(a, a)] = 0.1;
                }
                m
            }
        };

        Ok(HierSampler {
            spec: spec.clone(),
            hospital_ids: input.hospital_ids().to_vec(),
            to_internal,
            internal_ids: cohort.hospital_ids().to_vec(),
            y,
            ranges,
            cols,
            active,
            age_center,
            age_scale,
            init_mu: alpha0 + shift,
            init_beta1,
            init_beta0: init_beta0_orig.iter().map(|b| b + shift).collect(),
            fixed_chol,
            fixed_sd,
            active_idx,
        })
    }

    pub fn n_hospitals(&self) -> usize {
        self.ranges.len()
    }

    pub fn hospital_ids(&self) -> &[HospitalId] {
        &self.hospital_ids
    }

    fn collapsed(&self) -> bool {
        self.spec.collapsed()
    }

    fn has_spread(&self) -> bool {
        !self.collapsed() && self.fixed_tau2().is_none()
    }

    fn fixed_tau2(&self) -> Option<f64> {
        self.spec.prior.fixed_tau().map(|t| t * t)
    }

    /// Original-scale `mu` prior at working `mu` and working age slope.
    #[inline]
    fn lp_mu(&self, mu: f64, b_age: f64) -> f64 {
        let orig = mu - b_age * self.age_center / self.age_scale;
        normal_log_density(orig, 0.0, self.spec.mu_prior_variance)
    }

    #[inline]
    fn lp_beta(&self, k: usize, b: f64) -> f64 {
        let orig = if k == 0 { b / self.age_scale } else { b };
        normal_log_density(orig, 0.0, self.spec.beta_prior_variance)
    }

    fn lp_tau2(&self, tau2: f64, mu: f64, beta0: &[f64]) -> f64 {
        match self.spec.prior.log_density_tau2(tau2) {
            None => f64::NEG_INFINITY,
            Some((p, _)) => p + beta0.iter().map(|&b| normal_log_density(b, mu, tau2)).sum::<f64>(),
        }
    }

    fn update_names(&self, cfg: &ChainConfig) -> Vec<(String, f64, f64)> {
        let t = cfg.target_acceptance;
        let mut u = Vec::new();
        if !self.collapsed() {
            for (id, r) in self.internal_ids.iter().zip(&self.ranges) {
                u.push((format!("beta0[{}]", id.0), 2.0 / (r.len() as f64 * 0.02).sqrt().max(1.0), t));
            }
        }
        if cfg.joint_fixed_effects {
            let d = self.active_idx.len() as f64 + 1.0;
            u.push(("fixed_effects".into(), 2.38 / d.sqrt(), 0.234));
        }
        for (pos, &k) in self.active_idx.iter().enumerate() {
            u.push((format!("beta1[{}]", COVARIATE_NAMES[k]), 2.4 * self.fixed_sd[pos + 1].max(1e-3), t));
        }
        u.push(("mu".into(), 0.1, t));
        if !self.collapsed() && !cfg.joint_fixed_effects {
            u.push(("level".into(), 2.4 * self.fixed_sd[0].max(1e-3), t));
        }
        if self.fixed_tau2().is_none() && !matches!(self.spec.prior, PriorSpec::GammaOnPrecision { .. }) {
            u.push(("log_tau".into(), 0.5, t));
        }
        if self.has_spread() {
            u.push(("spread".into(), 0.3, t));
        }
        u
    }

    fn total_log_posterior(&self, s: &HierState) -> f64 {
        let mut lp: f64 = s.ll.iter().sum();
        lp += self.lp_mu(s.mu, s.beta1[0]);
        for k in 0..N_COVARIATES {
            if self.active[k] {
                lp += self.lp_beta(k, s.beta1[k]);
            }
        }
        if !self.collapsed() {
            lp += self.lp_tau2(s.tau2, s.mu, &s.beta0);
        }
        lp
    }

    fn refresh(&self, s: &mut HierState) {
        for (i, r) in self.ranges.iter().enumerate() {
            let b0 = if self.collapsed() { s.mu } else { s.beta0[i] };
            for e in &mut s.eta[r.clone()] {
                *e = b0;
            }
        }
        for (k, col) in self.cols.iter().enumerate() {
            for &(r, v) in col {
                s.eta[r as usize] += v * s.beta1[k];
            }
        }
        for ((l, &e), &y) in s.ll.iter_mut().zip(&s.eta).zip(&self.y) {
            *l = bernoulli_logit_ll(y, e);
        }
    }

    /// Shift the linear predictor of rows `range` by `delta`; returns the
    /// log-likelihood change and leaves candidate terms in `scratch`.
    #[inline]
    fn shift_rows(&self, s: &mut HierState, range: Range<usize>, delta: f64) -> f64 {
        let mut d = 0.0;
        for (j, r) in range.clone().enumerate() {
            let l = bernoulli_logit_ll(self.y[r], s.eta[r] + delta);
            s.scratch[j] = l;
            d += l - s.ll[r];
        }
        d
    }

    #[inline]
    fn commit_rows(&self, s: &mut HierState, range: Range<usize>, delta: f64) {
        for (j, r) in range.enumerate() {
            s.eta[r] += delta;
            s.ll[r] = s.scratch[j];
        }
    }

    fn update_beta0(&self, s: &mut HierState, rng: &mut ChaCha20Rng, tuner: &mut Tuner) {
        for i in 0..self.ranges.len() {
            let delta = tuner.step(i, rng);
            let r = self.ranges[i].clone();
            let old = s.beta0[i];
            let mut log_ratio = self.shift_rows(s, r.clone(), delta);
            log_ratio += normal_log_density(old + delta, s.mu, s.tau2) - normal_log_density(old, s.mu, s.tau2);
            let ok = accept(log_ratio, rng);
            tuner.record(i, ok);
            if ok {
                s.beta0[i] += delta;
                self.commit_rows(s, r, delta);
            }
        }
    }

    fn update_slopes(&self, s: &mut HierState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, first: usize) {
        for (pos, &k) in self.active_idx.iter().enumerate() {
            let u = first + pos;
            let delta = tuner.step(u, rng);
            let col = &self.cols[k];
            let mut log_ratio = 0.0;
            for (j, &(r, v)) in col.iter().enumerate() {
                let r = r as usize;
                let l = bernoulli_logit_ll(self.y[r], s.eta[r] + delta * v);
                s.scratch[j] = l;
                log_ratio += l - s.ll[r];
            }
            let old = s.beta1[k];
            log_ratio += self.lp_beta(k, old + delta) - self.lp_beta(k, old);
            if k == 0 && self.age_center != 0.0 {
                log_ratio += self.lp_mu(s.mu, old + delta) - self.lp_mu(s.mu, old);
            }
            let ok = accept(log_ratio, rng);
            tuner.record(u, ok);
            if ok {
                s.beta1[k] += delta;
                for (j, &(r, v)) in col.iter().enumerate() {
                    s.eta[r as usize] += delta * v;
                    s.ll[r as usize] = s.scratch[j];
                }
            }
        }
    }

    fn update_joint(&self, s: &mut HierState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, u: usize) {
        let dim = self.active_idx.len() + 1;
        let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let scale = tuner.scale(u);
        let delta: Vec<f64> = (0..dim).map(|a| scale * (0..=a).map(|b| self.fixed_chol[(a, b)] * z[b]).sum::<f64>()).collect();
        let n = self.y.len();
        for e in &mut s.scratch_eta[..n] {
            *e = delta[0];
        }
        for (pos, &k) in self.active_idx.iter().enumerate() {
            for &(r, v) in &self.cols[k] {
                s.scratch_eta[r as usize] += v * delta[pos + 1];
            }
        }
        let mut log_ratio = 0.0;
        for r in 0..n {
            let l = bernoulli_logit_ll(self.y[r], s.eta[r] + s.scratch_eta[r]);
            s.scratch[r] = l;
            log_ratio += l - s.ll[r];
        }
        let mut b_new = s.beta1;
        for (pos, &k) in self.active_idx.iter().enumerate() {
            b_new[k] += delta[pos + 1];
            log_ratio += self.lp_beta(k, b_new[k]) - self.lp_beta(k, s.beta1[k]);
        }
        log_ratio += self.lp_mu(s.mu + delta[0], b_new[0]) - self.lp_mu(s.mu, s.beta1[0]);
        let ok = accept(log_ratio, rng);
        tuner.record(u, ok);
        if ok {
            s.mu += delta[0];
            for b in &mut s.beta0 {
                *b += delta[0];
            }
            s.beta1 = b_new;
            for r in 0..n {
                s.eta[r] += s.scratch_eta[r];
                s.ll[r] = s.scratch[r];
            }
        }
    }

    fn update_mu(&self, s: &mut HierState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, u: usize) {
        let delta = tuner.step(u, rng);
        let mut log_ratio = self.lp_mu(s.mu + delta, s.beta1[0]) - self.lp_mu(s.mu, s.beta1[0]);
        if self.collapsed() {
            log_ratio += self.shift_rows(s, 0..self.y.len(), delta);
        } else {
            for &b in &s.beta0 {
                log_ratio += normal_log_density(b, s.mu + delta, s.tau2) - normal_log_density(b, s.mu, s.tau2);
            }
        }
        let ok = accept(log_ratio, rng);
        tuner.record(u, ok);
        if ok {
            s.mu += delta;
            if self.collapsed() {
                self.commit_rows(s, 0..self.y.len(), delta);
            }
        }
    }

    fn update_level(&self, s: &mut HierState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, u: usize) {
        let delta = tuner.step(u, rng);
        let mut log_ratio = self.shift_rows(s, 0..self.y.len(), delta);
        log_ratio += self.lp_mu(s.mu + delta, s.beta1[0]) - self.lp_mu(s.mu, s.beta1[0]);
        let ok = accept(log_ratio, rng);
        tuner.record(u, ok);
        if ok {
            s.mu += delta;
            for b in &mut s.beta0 {
                *b += delta;
            }
            self.commit_rows(s, 0..self.y.len(), delta);
        }
    }

    /// `beta0[i] = mu + f (beta0[i] - mu)`, `tau = f tau` with `f = exp(e)`.
    /// The normal terms lose `I e` which the Jacobian `exp((I + 2) e)` on
    /// (beta0, tau^2) restores, leaving the likelihood, the `tau^2` prior and
    /// `2 e`.
    fn update_spread(&self, s: &mut HierState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, u: usize) {
        let e = tuner.step(u, rng);
        let tau2 = s.tau2 * (2.0 * e).exp();
        let Some((lp_new, _)) = self.spec.prior.log_density_tau2(tau2) else {
            tuner.record(u, false);
            return;
        };
        let Some((lp_old, _)) = self.spec.prior.log_density_tau2(s.tau2) else { unreachable!("current tau2 in support") };
        let f = e.exp() - 1.0;
        let mut log_ratio = lp_new - lp_old + 2.0 * e;
        for (i, range) in self.ranges.iter().enumerate() {
            let delta = f * (s.beta0[i] - s.mu);
            for r in range.clone() {
                let l = bernoulli_logit_ll(self.y[r], s.eta[r] + delta);
                s.scratch[r] = l;
                log_ratio += l - s.ll[r];
            }
        }
        let ok = accept(log_ratio, rng);
        tuner.record(u, ok);
        if ok {
            s.tau2 = tau2;
            for (i, range) in self.ranges.iter().enumerate() {
                let delta = f * (s.beta0[i] - s.mu);
                s.beta0[i] += delta;
                for r in range.clone() {
                    s.eta[r] += delta;
                    s.ll[r] = s.scratch[r];
                }
            }
        }
    }

    fn update_tau(&self, s: &mut HierState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, u: Option<usize>) {
        match (self.spec.prior, u) {
            (PriorSpec::GammaOnPrecision { shape, rate }, _) => {
                let ss: f64 = s.beta0.iter().map(|b| (b - s.mu).powi(2)).sum();
                let post_shape = shape + 0.5 * s.beta0.len() as f64;
                let post_rate = rate + 0.5 * ss;
                let precision = Gamma::new(post_shape, 1.0 / post_rate).expect("positive gamma parameters").sample(rng);
                s.tau2 = 1.0 / precision;
            }
            (_, Some(u)) => {
                let step = tuner.step(u, rng);
                let proposal = s.tau2 * (2.0 * step).exp();
                // density of tau^2 times the Jacobian of the log-tau walk
                let log_ratio = self.lp_tau2(proposal, s.mu, &s.beta0) + proposal.ln()
                    - self.lp_tau2(s.tau2, s.mu, &s.beta0)
                    - s.tau2.ln();
                let ok = accept(log_ratio, rng);
                tuner.record(u, ok);
                if ok {
                    s.tau2 = proposal;
                }
            }
            _ => {}
        }
    }
}

fn initial_tau(spec: &HierSpec) -> f64 {
    match spec.prior {
        PriorSpec::Fixed { tau } => tau,
        PriorSpec::UniformOnSd { lo, hi } => TAU_INIT.clamp(lo + 0.01 * (hi - lo), hi - 0.01 * (hi - lo)),
        _ => TAU_INIT,
    }
}

impl ChainModel for HierSampler {
    type State = HierState;

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["mu".to_owned(), "tau2".to_owned()];
        names.extend(COVARIATE_NAMES.iter().map(|c| format!("beta1[{c}]")));
        names.extend(self.hospital_ids.iter().map(|h| format!("beta0[{}]", h.0)));
        names
    }

    fn updates(&self, cfg: &ChainConfig) -> Vec<(String, f64, f64)> {
        self.update_names(cfg)
    }

    fn init(&self, chain: usize, rng: &mut ChaCha20Rng) -> Result<HierState, SamplerError> {
        let n = self.y.len();
        let tau0 = initial_tau(&self.spec);
        let mut s = HierState {
            mu: self.init_mu,
            tau2: self.fixed_tau2().unwrap_or(tau0 * tau0),
            beta1: self.init_beta1,
            beta0: self.init_beta0.clone(),
            eta: vec![0.0; n],
            ll: vec![0.0; n],
            scratch: vec![0.0; n],
            scratch_eta: vec![0.0; n],
        };
        if chain > 0 {
            // overdispersed start: one MLE standard deviation in every direction
            let dim = self.active_idx.len() + 1;
            let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let d: Vec<f64> = (0..dim).map(|a| (0..=a).map(|b| self.fixed_chol[(a, b)] * z[b]).sum()).collect();
            s.mu += d[0];
            for (pos, &k) in self.active_idx.iter().enumerate() {
                s.beta1[k] += d[pos + 1];
            }
            for b in &mut s.beta0 {
                *b += d[0] + 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            if self.fixed_tau2().is_none() {
                let t = tau0 * (0.5 * rng.sample::<f64, _>(StandardNormal)).exp();
                let t = match self.spec.prior {
                    PriorSpec::UniformOnSd { lo, hi } => t.clamp(lo + 0.01 * (hi - lo), hi - 0.01 * (hi - lo)),
                    _ => t,
                };
                s.tau2 = t * t;
            }
        }
        self.refresh(&mut s);
        let lp = self.total_log_posterior(&s);
        if !lp.is_finite() {
            return Err(SamplerError::NonFiniteLogPosterior(format!("chain {chain}: {lp}")));
        }
        Ok(s)
    }

    fn sweep(&self, s: &mut HierState, rng: &mut ChaCha20Rng, tuner: &mut Tuner) {
        let mut u = 0;
        if !self.collapsed() {
            self.update_beta0(s, rng, tuner);
            u += self.ranges.len();
        }
        if tuner_is_joint(tuner) {
            self.update_joint(s, rng, tuner, u);
            u += 1;
        }
        self.update_slopes(s, rng, tuner, u);
        u += self.active_idx.len();
        self.update_mu(s, rng, tuner, u);
        u += 1;
        if !self.collapsed() && !tuner_is_joint(tuner) {
            self.update_level(s, rng, tuner, u);
            u += 1;
        }
        if !self.collapsed() && self.fixed_tau2().is_none() {
            let rw = !matches!(self.spec.prior, PriorSpec::GammaOnPrecision { .. });
            self.update_tau(s, rng, tuner, rw.then_some(u));
            if rw {
                u += 1;
            }
        }
        if self.has_spread() {
            self.update_spread(s, rng, tuner, u);
        }
    }

    fn record(&self, s: &HierState, out: &mut Vec<f64>) {
        let shift = s.beta1[0] * self.age_center / self.age_scale;
        out.push(s.mu - shift);
        out.push(s.tau2);
        out.push(s.beta1[0] / self.age_scale);
        out.extend_from_slice(&s.beta1[1..]);
        if self.collapsed() {
            out.extend(std::iter::repeat_n(s.mu - shift, self.ranges.len()));
        } else {
            out.extend(self.to_internal.iter().map(|&i| s.beta0[i] - shift));
        }
    }
}

fn tuner_is_joint(tuner: &Tuner) -> bool {
    tuner.names.iter().any(|n| n == "fixed_effects")
}

/// Posterior draws of the hierarchical model. Columns follow
/// [`MU`], [`TAU2`], [`beta1_index`] and [`beta0_index`].
pub fn sample_hier(spec: &HierSpec, cohort: &Cohort, cfg: &ChainConfig) -> Result<PosteriorDraws, SamplerError> {
    let model = HierSampler::new(spec, cohort)?;
    run_chains(&model, cfg)
}
