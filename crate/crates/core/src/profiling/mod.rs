//! Report cards from posterior draws: expected and risk-standardized rates,
//! excess deaths, predictive checks and the prior sensitivity table.

mod ppp;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ppp::{
    crossval_fold, ppp_crossval, ppp_fixed_tau, ppp_from_draws, ppp_replication, CrossvalCheck, PredictiveCheck,
    ReplicateIntercepts,
};

use crate::csv_field;
use crate::hiermodel::{HierSpec, PriorSpec};
use crate::numeric::{expit, Summary};
use crate::registry::{Cohort, HospitalId, RegistryError, N_COVARIATES};
use crate::sampler::{beta0_index, beta1_index, sample_hier, ChainConfig, PosteriorDraws, SamplerError, MU, TAU2};

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("{0}")]
    InvalidInput(String),
}

pub(crate) struct HospitalRows {
    pub id: HospitalId,
    pub designs: Vec<[f64; N_COVARIATES]>,
    pub deaths: usize,
}

/// Patients of a cohort grouped by hospital (input order), with a fixed
/// id-sorted visiting order for anything that consumes randomness.
pub struct CaseMix {
    hospitals: Vec<HospitalRows>,
    id_order: Vec<usize>,
}

impl CaseMix {
    pub fn new(cohort: &Cohort) -> Self {
        let designs = cohort.designs();
        let outcomes = cohort.outcomes();
        let hospitals: Vec<HospitalRows> = cohort
            .hospital_ids()
            .iter()
            .zip(cohort.rows_by_hospital())
            .map(|(id, rows)| HospitalRows {
                id: id.clone(),
                designs: rows.iter().map(|&j| designs[j].0).collect(),
                deaths: rows.iter().filter(|&&j| outcomes[j]).count(),
            })
            .collect();
        let mut id_order: Vec<usize> = (0..hospitals.len()).collect();
        id_order.sort_by(|&a, &b| hospitals[a].id.cmp(&hospitals[b].id));
        CaseMix { hospitals, id_order }
    }

    pub fn n_hospitals(&self) -> usize {
        self.hospitals.len()
    }

    pub(crate) fn id_order(&self) -> &[usize] {
        &self.id_order
    }

    pub(crate) fn slopes(row: &[f64]) -> &[f64] {
        &row[beta1_index(0)..beta1_index(N_COVARIATES)]
    }

    fn check_draws(&self, draws: &PosteriorDraws) -> Result<(), ProfileError> {
        let want = beta0_index(self.n_hospitals());
        if draws.n_params() != want {
            return Err(ProfileError::InvalidInput(format!(
                "draws carry {} parameters, cohort needs {want}",
                draws.n_params()
            )));
        }
        for (i, h) in self.hospitals.iter().enumerate() {
            if draws.names[beta0_index(i)] != format!("beta0[{}]", h.id) {
                return Err(ProfileError::InvalidInput(format!("draws do not belong to this cohort (hospital {})", h.id)));
            }
        }
        Ok(())
    }
}

/// Per-draw predicted and expected death counts of every hospital: the
/// numerator `sum_j expit(beta0_i + x'beta1)` and denominator
/// `sum_j expit(mu + x'beta1)` of the standardization ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedRates {
    pub hospital_ids: Vec<HospitalId>,
    pub n: Vec<usize>,
    pub deaths: Vec<usize>,
    pub anchor_pct: f64,
    /// `[hospital][draw]`
    pub predicted: Vec<Vec<f64>>,
    /// `[hospital][draw]`
    pub expected: Vec<Vec<f64>>,
}

impl StandardizedRates {
    pub fn n_draws(&self) -> usize {
        self.predicted.first().map_or(0, Vec::len)
    }

    pub fn ratios(&self, i: usize) -> Vec<f64> {
        self.predicted[i].iter().zip(&self.expected[i]).map(|(p, e)| p / e).collect()
    }

    /// Risk-standardized rate (%) of hospital `i` per draw.
    pub fn rates_pct(&self, i: usize) -> Vec<f64> {
        self.ratios(i).into_iter().map(|r| r * self.anchor_pct).collect()
    }

    pub fn summary(&self, i: usize) -> Summary {
        Summary::of(&self.rates_pct(i))
    }

    pub fn ratio_summary(&self, i: usize) -> Summary {
        Summary::of(&self.ratios(i))
    }

    /// Model-expected rate (%) of hospital `i` per draw.
    pub fn expected_pct(&self, i: usize) -> Vec<f64> {
        let n = self.n[i] as f64;
        self.expected[i].iter().map(|e| 100.0 * e / n).collect()
    }

    /// Same draws against a different anchor.
    pub fn with_anchor(&self, anchor_pct: f64) -> Self {
        StandardizedRates { anchor_pct, ..self.clone() }
    }

    /// Excess deaths of every hospital; negative values are additional
    /// survivors.
    pub fn excess_deaths(&self) -> Vec<f64> {
        (0..self.n.len())
            .map(|i| {
                let m = self.n_draws() as f64;
                let ratio = self.ratios(i).iter().sum::<f64>() / m;
                let expected = self.expected[i].iter().sum::<f64>() / m;
                excess_deaths(ratio, expected)
            })
            .collect()
    }
}

/// `(ratio - 1) * expected_deaths`.
pub fn excess_deaths(mean_ratio: f64, expected_deaths: f64) -> f64 {
    (mean_ratio - 1.0) * expected_deaths
}

fn death_sums(draws: &PosteriorDraws, cohort: &Cohort, with_hospital: bool) -> Result<(CaseMix, Vec<Vec<f64>>, Vec<Vec<f64>>), ProfileError> {
    let mix = CaseMix::new(cohort);
    mix.check_draws(draws)?;
    let rows: Vec<&[f64]> = draws.rows().collect();
    let per_draw: Vec<Vec<(f64, f64)>> = rows
        .par_iter()
        .map(|row| {
            let beta1 = CaseMix::slopes(row);
            mix.hospitals
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let b0 = row[beta0_index(i)];
                    let mut pred = 0.0;
                    let mut exp = 0.0;
                    for x in &h.designs {
                        let lin: f64 = x.iter().zip(beta1).map(|(a, b)| a * b).sum();
                        exp += expit(row[MU] + lin);
                        if with_hospital {
                            pred += expit(b0 + lin);
                        }
                    }
                    (pred, exp)
                })
                .collect()
        })
        .collect();
    let h = mix.n_hospitals();
    let predicted = (0..h).map(|i| per_draw.iter().map(|d| d[i].0).collect()).collect();
    let expected = (0..h).map(|i| per_draw.iter().map(|d| d[i].1).collect()).collect();
    Ok((mix, predicted, expected))
}

/// Posterior summary (%) of each hospital's expected rate: its patients'
/// average risk under the state-level intercept `mu` and slopes.
pub fn expected_rate_hier(draws: &PosteriorDraws, cohort: &Cohort) -> Result<Vec<Summary>, ProfileError> {
    let (mix, _, expected) = death_sums(draws, cohort, false)?;
    Ok(mix
        .hospitals
        .iter()
        .zip(expected)
        .map(|(h, e)| {
            let n = h.designs.len() as f64;
            Summary::of(&e.iter().map(|x| 100.0 * x / n).collect::<Vec<_>>())
        })
        .collect())
}

/// Standardization ratios scaled by `anchor_pct` (the state rate in %).
pub fn risk_standardized_rate(draws: &PosteriorDraws, cohort: &Cohort, anchor_pct: f64) -> Result<StandardizedRates, ProfileError> {
    if !(anchor_pct > 0.0 && anchor_pct.is_finite()) {
        return Err(ProfileError::InvalidInput(format!("anchor must be positive, got {anchor_pct}")));
    }
    let (mix, predicted, expected) = death_sums(draws, cohort, true)?;
    Ok(StandardizedRates {
        hospital_ids: mix.hospitals.iter().map(|h| h.id.clone()).collect(),
        n: mix.hospitals.iter().map(|h| h.designs.len()).collect(),
        deaths: mix.hospitals.iter().map(|h| h.deaths).collect(),
        anchor_pct,
        predicted,
        expected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub hospital_id: HospitalId,
    pub draw: usize,
    pub expected_pct: f64,
    pub predicted_pct: f64,
}

/// Expected versus predicted rate (%) per draw; points above the diagonal
/// are draws in which the hospital does worse than its case mix predicts.
pub fn scatter_data(rates: &StandardizedRates) -> Vec<ScatterPoint> {
    let mut out = Vec::with_capacity(rates.n.len() * rates.n_draws());
    for (i, id) in rates.hospital_ids.iter().enumerate() {
        let n = rates.n[i] as f64;
        for t in 0..rates.n_draws() {
            out.push(ScatterPoint {
                hospital_id: id.clone(),
                draw: t,
                expected_pct: 100.0 * rates.expected[i][t] / n,
                predicted_pct: 100.0 * rates.predicted[i][t] / n,
            });
        }
    }
    out
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut s = String::from("hospital_id,draw,expected_pct,predicted_pct\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", csv_field(&p.hospital_id.0), p.draw, p.expected_pct, p.predicted_pct);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub prior: PriorSpec,
    pub label: String,
    pub tau2: Summary,
    pub mu: Summary,
    pub converged: bool,
}

/// One fit per prior, all with `cfg`'s seed.
pub fn sensitivity_suite(
    base: &HierSpec,
    cohort: &Cohort,
    priors: &[PriorSpec],
    cfg: &ChainConfig,
) -> Result<Vec<SensitivityRow>, ProfileError> {
    if priors.is_empty() {
        return Err(ProfileError::InvalidInput("no priors to compare".into()));
    }
    priors
        .iter()
        .map(|&prior| {
            let d = sample_hier(&HierSpec { prior, ..base.clone() }, cohort, cfg)?;
            Ok(SensitivityRow { prior, label: prior.label(), tau2: d.summary(TAU2), mu: d.summary(MU), converged: d.converged })
        })
        .collect()
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut s = String::from(
        "prior,tau2_mean,tau2_median,tau2_lower,tau2_upper,mu_mean,mu_median,mu_lower,mu_upper,converged\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.label),
            r.tau2.mean,
            r.tau2.median,
            r.tau2.lower,
            r.tau2.upper,
            r.mu.mean,
            r.mu.median,
            r.mu.lower,
            r.mu.upper,
            r.converged
        );
    }
    s
}

/// Tail cuts on predictive p-values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagCuts {
    pub extreme_low: f64,
    pub extreme_high: f64,
    pub suspect_low: f64,
    pub suspect_high: f64,
}

impl Default for FlagCuts {
    fn default() -> Self {
        FlagCuts { extreme_low: 0.01, extreme_high: 0.99, suspect_low: 0.05, suspect_high: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagLevel {
    None,
    Suspect,
    Extreme,
}

impl FlagLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            FlagLevel::None => "",
            FlagLevel::Suspect => "suspect",
            FlagLevel::Extreme => "extreme",
        }
    }
}

impl FlagCuts {
    pub fn classify(&self, p: f64) -> FlagLevel {
        if p <= self.extreme_low || p >= self.extreme_high {
            FlagLevel::Extreme
        } else if p <= self.suspect_low || p >= self.suspect_high {
            FlagLevel::Suspect
        } else {
            FlagLevel::None
        }
    }
}

/// One outlier strategy's verdict on one hospital.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub p_value: f64,
    pub replicated_mean_pct: f64,
    /// Observed minus mean replicated rate, in percentage points.
    pub difference_pp: f64,
    pub flag: FlagLevel,
    /// The difference reaches the practical-significance threshold.
    pub practically_significant: bool,
}

impl StrategyResult {
    fn new(check: &PredictiveCheck, cuts: &FlagCuts, threshold_pp: f64) -> Self {
        let diff = check.observed_pct() - check.replicated_mean_pct;
        StrategyResult {
            p_value: check.p_value,
            replicated_mean_pct: check.replicated_mean_pct,
            difference_pp: diff,
            flag: cuts.classify(check.p_value),
            practically_significant: diff.abs() >= threshold_pp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalResult {
    #[serde(flatten)]
    pub strategy: StrategyResult,
    pub mu_without: Summary,
    pub tau2_without: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HospitalProfile {
    pub hospital_id: HospitalId,
    pub n: usize,
    pub deaths: usize,
    pub observed_pct: f64,
    pub expected_pct: Summary,
    pub standardized_pct: Summary,
    pub ratio: Summary,
    pub excess_deaths: f64,
    pub replication: StrategyResult,
    pub fixed_tau: Option<StrategyResult>,
    pub crossval: Option<CrossvalResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Cohort's pooled crude rate.
    Pooled,
    /// Explicit rate in percent.
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileOptions {
    pub anchor: AnchorPolicy,
    /// In-control `tau` of the fixed-tau strategy; `None` skips it.
    pub in_control_tau: Option<f64>,
    pub crossval: bool,
    pub replicate_intercepts: ReplicateIntercepts,
    pub cuts: FlagCuts,
    pub practical_threshold_pp: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            anchor: AnchorPolicy::Pooled,
            in_control_tau: Some(0.10),
            crossval: false,
            replicate_intercepts: ReplicateIntercepts::Redraw,
            cuts: FlagCuts::default(),
            practical_threshold_pp: 1.0,
        }
    }
}

/// Worst R̂ and smallest ESS over all parameters of a fit.
pub fn extreme_diagnostics(d: &PosteriorDraws) -> (Option<f64>, Option<f64>) {
    let diag = d.diagnostics.as_deref();
    (
        diag.map(|v| v.iter().map(|p| p.rhat).fold(f64::NEG_INFINITY, f64::max)),
        diag.map(|v| v.iter().map(|p| p.ess).fold(f64::INFINITY, f64::min)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStatus {
    pub name: String,
    pub converged: bool,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
}

impl FitStatus {
    fn of(name: impl Into<String>, d: &PosteriorDraws) -> Self {
        let (max_rhat, min_ess) = extreme_diagnostics(d);
        FitStatus { name: name.into(), converged: d.converged, max_rhat, min_ess }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub hospitals: Vec<HospitalProfile>,
    pub state_crude_rate_pct: f64,
    pub anchor_pct: f64,
    pub spec: HierSpec,
    pub prior_label: String,
    pub options: ProfileOptions,
    pub chain: ChainConfig,
    pub seed: u64,
    pub mu: Summary,
    pub tau2: Summary,
    pub fits: Vec<FitStatus>,
    pub converged: bool,
}

/// Everything a report is built from, kept for plot data.
pub struct ProfileArtifacts {
    pub draws: PosteriorDraws,
    pub rates: StandardizedRates,
}

/// Fit the hierarchical model and assemble the report card.
pub fn profile(
    spec: &HierSpec,
    cohort: &Cohort,
    cfg: &ChainConfig,
    opts: &ProfileOptions,
) -> Result<(ProfileReport, ProfileArtifacts), ProfileError> {
    let crude = 100.0 * cohort.crude_rate();
    let anchor = match opts.anchor {
        AnchorPolicy::Pooled => crude,
        AnchorPolicy::Explicit(a) => a,
    };
    let (replication, draws) = ppp_replication(spec, cohort, cfg, opts.replicate_intercepts)?;
    let rates = risk_standardized_rate(&draws, cohort, anchor)?;
    let excess = rates.excess_deaths();
    let mut fits = vec![FitStatus::of("main", &draws)];

    let fixed = match (spec.prior.fixed_tau(), opts.in_control_tau) {
        (Some(_), _) => Some(replication.clone()),
        (None, Some(tau)) => {
            let fixed_spec = HierSpec { prior: PriorSpec::Fixed { tau }, ..spec.clone() };
            let (checks, d) = ppp_fixed_tau(&fixed_spec, cohort, cfg)?;
            fits.push(FitStatus::of(format!("fixed_tau={tau}"), &d));
            Some(checks)
        }
        (None, None) => None,
    };
    let crossval = if opts.crossval {
        let cv = ppp_crossval(spec, cohort, cfg)?;
        fits.extend(cv.iter().map(|c| FitStatus {
            name: format!("without {}", c.check.hospital_id),
            converged: c.converged,
            max_rhat: c.max_rhat,
            min_ess: c.min_ess,
        }));
        Some(cv)
    } else {
        None
    };

    let hospitals = (0..cohort.n_hospitals())
        .map(|i| {
            let r = &replication[i];
            HospitalProfile {
                hospital_id: r.hospital_id.clone(),
                n: r.n,
                deaths: r.deaths,
                observed_pct: r.observed_pct(),
                expected_pct: Summary::of(&rates.expected_pct(i)),
                standardized_pct: rates.summary(i),
                ratio: rates.ratio_summary(i),
                excess_deaths: excess[i],
                replication: StrategyResult::new(r, &opts.cuts, opts.practical_threshold_pp),
                fixed_tau: fixed.as_ref().map(|f| StrategyResult::new(&f[i], &opts.cuts, opts.practical_threshold_pp)),
                crossval: crossval.as_ref().map(|cv| CrossvalResult {
                    strategy: StrategyResult::new(&cv[i].check, &opts.cuts, opts.practical_threshold_pp),
                    mu_without: cv[i].mu,
                    tau2_without: cv[i].tau2,
                }),
            }
        })
        .collect();
    let report = ProfileReport {
        hospitals,
        state_crude_rate_pct: crude,
        anchor_pct: anchor,
        spec: spec.clone(),
        prior_label: spec.prior.label(),
        options: opts.clone(),
        chain: cfg.clone(),
        seed: cfg.seed,
        mu: draws.summary(MU),
        tau2: draws.summary(TAU2),
        converged: fits.iter().all(|f| f.converged),
        fits,
    };
    Ok((report, ProfileArtifacts { draws, rates }))
}

impl ProfileReport {
    /// Flat per-hospital table, one row per hospital.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "hospital_id,n,deaths,observed_pct,expected_pct,rsmr_mean,rsmr_median,rsmr_lower,rsmr_upper,excess_deaths,\
             p_replication,flag_replication,p_fixed_tau,flag_fixed_tau,p_crossval,flag_crossval,mu_without,tau2_without\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for h in &self.hospitals {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&h.hospital_id.0),
                h.n,
                h.deaths,
                h.observed_pct,
                h.expected_pct.mean,
                h.standardized_pct.mean,
                h.standardized_pct.median,
                h.standardized_pct.lower,
                h.standardized_pct.upper,
                h.excess_deaths,
                h.replication.p_value,
                h.replication.flag.as_str(),
                opt(h.fixed_tau.as_ref().map(|f| f.p_value)),
                h.fixed_tau.as_ref().map_or("", |f| f.flag.as_str()),
                opt(h.crossval.as_ref().map(|c| c.strategy.p_value)),
                h.crossval.as_ref().map_or("", |c| c.strategy.flag.as_str()),
                opt(h.crossval.as_ref().map(|c| c.mu_without.mean)),
                opt(h.crossval.as_ref().map(|c| c.tau2_without.mean)),
            );
        }
        s
    }

    /// Caterpillar plot data: standardized rate summaries sorted by mean.
    pub fn caterpillar_csv(&self) -> String {
        let mut rows: Vec<&HospitalProfile> = self.hospitals.iter().collect();
        rows.sort_by(|a, b| a.standardized_pct.mean.total_cmp(&b.standardized_pct.mean).then(a.hospital_id.cmp(&b.hospital_id)));
        let mut s = String::from("rank,hospital_id,mean,median,lower,upper,anchor\n");
        for (k, h) in rows.iter().enumerate() {
            let r = &h.standardized_pct;
            let _ = writeln!(s, "{},{},{},{},{},{},{}", k + 1, csv_field(&h.hospital_id.0), r.mean, r.median, r.lower, r.upper, self.anchor_pct);
        }
        s
    }
}
