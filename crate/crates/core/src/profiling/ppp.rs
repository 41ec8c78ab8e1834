//! Posterior predictive checks: replicate each hospital's death count under
//! the fitted model and report the fraction of replicates at least as high
//! as observed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CaseMix, ProfileError};
use crate::hiermodel::HierSpec;
use crate::numeric::{expit, Summary};
use crate::registry::{Cohort, HospitalId};
use crate::sampler::{beta0_index, sample_hier, ChainConfig, PosteriorDraws, MU, TAU2};

/// Keeps replicate streams apart from the chain streams of the same seed.
const REPLICATE_KEY: u64 = 0x9E37_79B9_7F4A_7C15;

/// Source of the intercepts of replicated hospitals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateIntercepts {
    /// Fresh `beta0 ~ N(mu, tau^2)` for every replicate.
    #[default]
    Redraw,
    /// The hospital's own sampled `beta0[i]`.
    Reuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveCheck {
    pub hospital_id: HospitalId,
    pub n: usize,
    pub deaths: usize,
    /// Fraction of replicates with at least the observed number of deaths.
    pub p_value: f64,
    pub replicated_mean_pct: f64,
}

impl PredictiveCheck {
    pub fn observed_pct(&self) -> f64 {
        100.0 * self.deaths as f64 / self.n as f64
    }
}

fn replicate_rng(seed: u64, draw: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ REPLICATE_KEY);
    rng.set_stream(draw as u64);
    rng
}

/// Replicated deaths over `rows` with intercept `b0` and slopes `beta1`.
#[inline]
fn replicate_deaths(rows: &[[f64; crate::registry::N_COVARIATES]], b0: f64, beta1: &[f64], rng: &mut ChaCha20Rng) -> usize {
    rows.iter()
        .filter(|x| {
            let eta = b0 + x.iter().zip(beta1).map(|(a, b)| a * b).sum::<f64>();
            rng.random::<f64>() < expit(eta)
        })
        .count()
}

/// Replication check of every hospital from existing draws of a fit to the
/// same cohort. Replicates keep each hospital's patients and covariates.
pub fn ppp_from_draws(
    draws: &PosteriorDraws,
    cohort: &Cohort,
    intercepts: ReplicateIntercepts,
    seed: u64,
) -> Result<Vec<PredictiveCheck>, ProfileError> {
    let mix = CaseMix::new(cohort);
    mix.check_draws(draws)?;
    let rows: Vec<&[f64]> = draws.rows().collect();
    let h = mix.n_hospitals();
    // (exceedances, replicated deaths) per hospital
    let totals = rows
        .par_iter()
        .enumerate()
        .map(|(t, row)| {
            let mut rng = replicate_rng(seed, t);
            let beta1 = CaseMix::slopes(row);
            let mut out = vec![(0usize, 0usize); h];
            for &i in mix.id_order() {
                let b0 = match intercepts {
                    ReplicateIntercepts::Redraw => row[MU] + row[TAU2].sqrt() * rng.sample::<f64, _>(StandardNormal),
                    ReplicateIntercepts::Reuse => row[beta0_index(i)],
                };
                let rep = replicate_deaths(&mix.hospitals[i].designs, b0, beta1, &mut rng);
                out[i] = (usize::from(rep >= mix.hospitals[i].deaths), rep);
            }
            out
        })
        .reduce(
            || vec![(0, 0); h],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    x.0 += y.0;
                    x.1 += y.1;
                }
                a
            },
        );
    let m = rows.len() as f64;
    Ok(mix
        .hospitals
        .iter()
        .zip(totals)
        .map(|(hosp, (exceed, reps))| PredictiveCheck {
            hospital_id: hosp.id.clone(),
            n: hosp.designs.len(),
            deaths: hosp.deaths,
            p_value: exceed as f64 / m,
            replicated_mean_pct: 100.0 * reps as f64 / (m * hosp.designs.len() as f64),
        })
        .collect())
}

/// Fit `spec` and check every hospital against replicates of the whole
/// registry.
pub fn ppp_replication(
    spec: &HierSpec,
    cohort: &Cohort,
    cfg: &ChainConfig,
    intercepts: ReplicateIntercepts,
) -> Result<(Vec<PredictiveCheck>, PosteriorDraws), ProfileError> {
    let draws = sample_hier(spec, cohort, cfg)?;
    let checks = ppp_from_draws(&draws, cohort, intercepts, cfg.seed)?;
    Ok((checks, draws))
}

/// Replication check with `tau` held at an in-control value; `mu` and the
/// slopes are still estimated.
pub fn ppp_fixed_tau(
    spec: &HierSpec,
    cohort: &Cohort,
    cfg: &ChainConfig,
) -> Result<(Vec<PredictiveCheck>, PosteriorDraws), ProfileError> {
    if spec.prior.fixed_tau().is_none() {
        return Err(ProfileError::InvalidInput(format!("fixed-tau check needs a fixed prior, got {}", spec.prior.label())));
    }
    ppp_replication(spec, cohort, cfg, ReplicateIntercepts::Redraw)
}

/// Leave-one-out check of one hospital with summaries of the hyperparameters
/// fitted without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalCheck {
    #[serde(flatten)]
    pub check: PredictiveCheck,
    pub mu: Summary,
    pub tau2: Summary,
    pub converged: bool,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
}

/// Refit without each hospital in turn and predict the held-out hospital
/// from `N(mu, tau^2)` over its own patients. Folds are numbered by hospital
/// id order and fold `k` is seeded `cfg.seed + k`.
pub fn ppp_crossval(spec: &HierSpec, cohort: &Cohort, cfg: &ChainConfig) -> Result<Vec<CrossvalCheck>, ProfileError> {
    if cohort.n_hospitals() < 3 {
        return Err(ProfileError::InvalidInput(format!(
            "cross-validation needs at least 3 hospitals, got {}",
            cohort.n_hospitals()
        )));
    }
    let mix = CaseMix::new(cohort);
    (0..mix.n_hospitals())
        .into_par_iter()
        .map(|fold| crossval_fold(spec, cohort, &mix, cfg, fold))
        .collect()
}

/// The [`ppp_crossval`] fold holding out input hospital `hospital`.
pub fn crossval_fold(
    spec: &HierSpec,
    cohort: &Cohort,
    mix: &CaseMix,
    cfg: &ChainConfig,
    hospital: usize,
) -> Result<CrossvalCheck, ProfileError> {
    let hosp = &mix.hospitals[hospital];
    let fold = mix.id_order().iter().position(|&i| i == hospital).expect("hospital in case mix");
    let rest = cohort.without_hospital(&hosp.id)?;
    let fold_cfg = cfg.with_seed(cfg.seed.wrapping_add(fold as u64));
    let draws = sample_hier(spec, &rest, &fold_cfg)?;
    let mut exceed = 0usize;
    let mut reps = 0usize;
    for (t, row) in draws.rows().enumerate() {
        let mut rng = replicate_rng(fold_cfg.seed, t);
        let b0 = row[MU] + row[TAU2].sqrt() * rng.sample::<f64, _>(StandardNormal);
        let rep = replicate_deaths(&hosp.designs, b0, CaseMix::slopes(row), &mut rng);
        exceed += usize::from(rep >= hosp.deaths);
        reps += rep;
    }
    let m = draws.n_draws() as f64;
    let (max_rhat, min_ess) = super::extreme_diagnostics(&draws);
    Ok(CrossvalCheck {
        check: PredictiveCheck {
            hospital_id: hosp.id.clone(),
            n: hosp.designs.len(),
            deaths: hosp.deaths,
            p_value: exceed as f64 / m,
            replicated_mean_pct: 100.0 * reps as f64 / (m * hosp.designs.len() as f64),
        },
        mu: draws.summary(MU),
        tau2: draws.summary(TAU2),
        converged: draws.converged,
        max_rhat,
        min_ess,
    })
}
