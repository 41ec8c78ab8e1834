//! Synthetic cohorts calibrated to published registry marginals.
//!
//! Risk factors are drawn independently (categorical groups jointly) from
//! their published prevalences. Each hospital's case mix is then tilted by a
//! single scalar `s`: every factor's prevalence logit moves by `s * beta_k`
//! (categorical weights by `exp(s * beta_c)`, the latent age normal by
//! `s * beta_age * sd^2`), i.e. an exponential tilt of the covariate law along
//! the risk score. `s` is found by bisection so that the realized mean
//! predicted risk of the hospital's patients hits its expected-rate target.
//! Uniforms are fixed before the search, so every factor is monotone in `s`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    Cohort, EfCategory, HospitalId, MiCategory, PatientRecord, RegistryError, Status, COVARIATE_NAMES,
    N_COVARIATES,
};
use crate::numeric::{expit, logit};

const BINARY_FLAGS: [&str; 8] =
    ["male", "renal_failure", "diabetes", "hypertension", "pvd", "prior_pci", "shock", "iabp"];
const TILT_BRACKET: f64 = 8.0;
const BISECTION_STEPS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HospitalTarget {
    pub id: HospitalId,
    pub volume: usize,
    pub deaths: usize,
    pub expected_pct: f64,
}

/// Published risk-factor prevalences, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskFactorPrevalence {
    pub binary_pct: BTreeMap<String, f64>,
    pub ef_cat_pct: BTreeMap<EfCategory, f64>,
    pub mi_cat_pct: BTreeMap<MiCategory, f64>,
    pub status_pct: BTreeMap<Status, f64>,
    pub yrs_over_65_mean: f64,
}

/// `yrs_over_65 = clamp(Normal(latent_mean, latent_sd), 0, max)`.
///
/// Only the mean of the latent normal is published; the spread is a declared
/// convention and is echoed in the generator metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeConvention {
    pub latent_mean: f64,
    pub latent_sd: f64,
    pub max: f64,
}

impl Default for AgeConvention {
    fn default() -> Self {
        AgeConvention { latent_mean: 1.5, latent_sd: 4.0, max: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub hospitals: Vec<HospitalTarget>,
    pub prevalence: RiskFactorPrevalence,
    /// Adjusted odds ratios keyed by covariate name.
    pub odds_ratios: BTreeMap<String, f64>,
    #[serde(default)]
    pub age: AgeConvention,
}

impl CalibrationTargets {
    /// The 13-program 2002 isolated-CABG registry marginals.
    pub fn massachusetts() -> Self {
        serde_json::from_str(include_str!("../../data/massachusetts_targets.json"))
            .expect("shipped targets parse")
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let bad = |m: String| Err(RegistryError::InvalidTargets(m));
        if self.hospitals.is_empty() {
            return bad("no hospitals".into());
        }
        for h in &self.hospitals {
            if h.volume == 0 {
                return bad(format!("hospitals[{}].volume must be >= 1", h.id));
            }
            if h.deaths > h.volume {
                return bad(format!("hospitals[{}].deaths exceeds volume", h.id));
            }
            if !(h.expected_pct > 0.0 && h.expected_pct < 100.0) {
                return bad(format!("hospitals[{}].expected_pct must be in (0, 100)", h.id));
            }
        }
        for name in BINARY_FLAGS {
            match self.prevalence.binary_pct.get(name) {
                Some(p) if (0.0..=100.0).contains(p) => {}
                Some(_) => return bad(format!("prevalence.binary_pct.{name} outside [0, 100]")),
                None => return bad(format!("prevalence.binary_pct.{name} missing")),
            }
        }
        let groups: [(&str, Vec<f64>, usize); 3] = [
            ("ef_cat_pct", self.prevalence.ef_cat_pct.values().copied().collect(), EfCategory::ALL.len()),
            ("mi_cat_pct", self.prevalence.mi_cat_pct.values().copied().collect(), MiCategory::ALL.len()),
            ("status_pct", self.prevalence.status_pct.values().copied().collect(), Status::ALL.len()),
        ];
        for (name, vals, len) in groups {
            if vals.len() != len {
                return bad(format!("prevalence.{name} needs {len} levels"));
            }
            if vals.iter().any(|p| !(0.0..=100.0).contains(p)) || vals.iter().sum::<f64>() <= 0.0 {
                return bad(format!("prevalence.{name} outside [0, 100]"));
            }
        }
        for name in COVARIATE_NAMES {
            match self.odds_ratios.get(name) {
                Some(&or) if or > 0.0 && or.is_finite() => {}
                _ => return bad(format!("odds_ratios.{name} missing or not positive")),
            }
        }
        let a = self.age;
        if !(a.latent_sd > 0.0 && a.max > 0.0 && a.latent_mean.is_finite()) {
            return bad("age convention invalid".into());
        }
        Ok(())
    }

    pub fn total_volume(&self) -> usize {
        self.hospitals.iter().map(|h| h.volume).sum()
    }

    pub fn total_deaths(&self) -> usize {
        self.hospitals.iter().map(|h| h.deaths).sum()
    }

    /// Log odds ratios in design-vector order.
    pub fn log_odds(&self) -> [f64; N_COVARIATES] {
        let mut out = [0.0; N_COVARIATES];
        for (k, name) in COVARIATE_NAMES.iter().enumerate() {
            out[k] = self.odds_ratios[*name].ln();
        }
        out
    }
}

/// Logistic risk model: intercept plus design-vector slopes (log-odds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl RiskModel {
    /// Shipped generating model: published log odds ratios with the intercept
    /// placing the untilted population risk at the state crude rate.
    pub fn massachusetts() -> Self {
        serde_json::from_str(include_str!("../../data/massachusetts_coefficients.json"))
            .expect("shipped coefficients parse")
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.coefficients.len() != N_COVARIATES {
            return Err(RegistryError::InvalidTargets(format!(
                "coefficients must have length {N_COVARIATES}, found {}",
                self.coefficients.len()
            )));
        }
        if !self.intercept.is_finite() || self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(RegistryError::InvalidTargets("coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn linear_predictor(&self, x: &[f64; N_COVARIATES]) -> f64 {
        self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Intercept for which the untilted population risk equals `target_rate`.
    pub fn calibrate_intercept(
        coefficients: Vec<f64>,
        prevalence: &RiskFactorPrevalence,
        age: AgeConvention,
        target_rate: f64,
    ) -> Self {
        let (mut lo, mut hi) = (-20.0, 5.0);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            let m = RiskModel { intercept: mid, coefficients: coefficients.clone() };
            if population_expected_rate(prevalence, age, &m, 0.0) < target_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        RiskModel { intercept: 0.5 * (lo + hi), coefficients }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeModel {
    /// Each hospital gets exactly its target death count; which patients die
    /// follows the logistic model conditional on that total.
    MatchDeathCounts,
    /// Independent Bernoulli outcomes from the logistic model.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub seed: u64,
    pub outcome: OutcomeModel,
    /// Replaces every hospital's volume; death targets are rescaled and rounded.
    pub volume_override: Option<usize>,
    pub tolerance_pp: f64,
    /// Fresh uniform draws tried per hospital before giving up.
    pub max_attempts: u32,
}

impl SynthesisOptions {
    pub fn new(seed: u64) -> Self {
        SynthesisOptions {
            seed,
            outcome: OutcomeModel::MatchDeathCounts,
            volume_override: None,
            tolerance_pp: 0.15,
            max_attempts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltRecord {
    pub hospital_id: HospitalId,
    pub shift: f64,
    pub target_expected_pct: f64,
    pub achieved_expected_pct: f64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetadata {
    pub seed: u64,
    pub outcome_model: OutcomeModel,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub age_convention: AgeConvention,
    pub tilts: Vec<TiltRecord>,
}

/// Resolved sampling probabilities for one tilt value.
struct TiltedLaw {
    binary: [f64; 8],
    ef_cdf: [f64; 3],
    mi_cdf: [f64; 6],
    status_cdf: [f64; 3],
    age_mean: f64,
}

fn group_cdf<const N: usize>(pct: &[f64; N], beta: &[f64; N], tilt: f64) -> [f64; N] {
    let mut w = [0.0; N];
    for c in 0..N {
        w[c] = pct[c] * (tilt * beta[c]).exp();
    }
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    for c in 0..N {
        acc += w[c] / total;
        w[c] = acc;
    }
    w[N - 1] = 1.0;
    w
}

struct Law<'a> {
    binary_pct: [f64; 8],
    ef_pct: [f64; 3],
    mi_pct: [f64; 6],
    status_pct: [f64; 3],
    age: AgeConvention,
    model: &'a RiskModel,
}

impl<'a> Law<'a> {
    fn new(prev: &RiskFactorPrevalence, age: AgeConvention, model: &'a RiskModel) -> Self {
        let mut binary_pct = [0.0; 8];
        for (k, name) in BINARY_FLAGS.iter().enumerate() {
            binary_pct[k] = prev.binary_pct[*name];
        }
        let pick = |m: &dyn Fn(usize) -> f64, n: usize| (0..n).map(m).collect::<Vec<_>>();
        let ef = pick(&|i| prev.ef_cat_pct[&EfCategory::ALL[i]], 3);
        let mi = pick(&|i| prev.mi_cat_pct[&MiCategory::ALL[i]], 6);
        let st = pick(&|i| prev.status_pct[&Status::ALL[i]], 3);
        Law {
            binary_pct,
            ef_pct: ef.try_into().unwrap(),
            mi_pct: mi.try_into().unwrap(),
            status_pct: st.try_into().unwrap(),
            age,
            model,
        }
    }

    fn tilted(&self, tilt: f64) -> TiltedLaw {
        let b = &self.model.coefficients;
        let mut binary = [0.0; 8];
        for k in 0..8 {
            let p = self.binary_pct[k] / 100.0;
            binary[k] = if p <= 0.0 || p >= 1.0 { p } else { expit(logit(p) + tilt * b[1 + k]) };
        }
        TiltedLaw {
            binary,
            ef_cdf: group_cdf(&self.ef_pct, &[0.0, b[9], b[10]], tilt),
            mi_cdf: group_cdf(&self.mi_pct, &[0.0, b[11], b[12], b[13], b[14], b[15]], tilt),
            status_cdf: group_cdf(&self.status_pct, &[0.0, b[16], b[17]], tilt),
            age_mean: self.age.latent_mean + tilt * b[0] * self.age.latent_sd * self.age.latent_sd,
        }
    }
}

/// Fixed randomness behind one synthetic patient.
struct PatientUniforms {
    binary: [f64; 8],
    ef: f64,
    mi: f64,
    status: f64,
    age_z: f64,
}

impl PatientUniforms {
    fn draw(rng: &mut impl Rng) -> Self {
        let mut binary = [0.0; 8];
        for u in &mut binary {
            *u = rng.random();
        }
        PatientUniforms {
            binary,
            ef: rng.random(),
            mi: rng.random(),
            status: rng.random(),
            age_z: rng.sample(StandardNormal),
        }
    }

    fn realize(&self, law: &TiltedLaw, age: AgeConvention, hospital: &HospitalId) -> PatientRecord {
        let flag = |k: usize| self.binary[k] < law.binary[k];
        let pick = |cdf: &[f64], u: f64| cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
        let yrs = (law.age_mean + age.latent_sd * self.age_z).clamp(0.0, age.max);
        PatientRecord {
            hospital_id: hospital.clone(),
            death30: false,
            yrs_over_65: yrs,
            male: flag(0),
            renal_failure: flag(1),
            diabetes: flag(2),
            hypertension: flag(3),
            pvd: flag(4),
            prior_pci: flag(5),
            shock: flag(6),
            iabp: flag(7),
            ef_cat: EfCategory::ALL[pick(&law.ef_cdf, self.ef)],
            mi_cat: MiCategory::ALL[pick(&law.mi_cdf, self.mi)],
            status: Status::ALL[pick(&law.status_cdf, self.status)],
        }
    }
}

fn realized_rate(
    uniforms: &[PatientUniforms],
    law: &Law<'_>,
    tilt: f64,
    hospital: &HospitalId,
) -> (f64, Vec<PatientRecord>) {
    let tl = law.tilted(tilt);
    let records: Vec<PatientRecord> =
        uniforms.iter().map(|u| u.realize(&tl, law.age, hospital)).collect();
    let rate = records.iter().map(|r| expit(law.model.linear_predictor(&r.design().0))).sum::<f64>()
        / records.len() as f64;
    (rate, records)
}

/// Draws a synthetic cohort whose per-hospital model-expected mortality matches
/// the targets. Deterministic given `options.seed`.
pub fn synthesize_cohort(
    targets: &CalibrationTargets,
    model: &RiskModel,
    options: &SynthesisOptions,
) -> Result<(Cohort, GeneratorMetadata), RegistryError> {
    targets.validate()?;
    model.validate()?;
    if options.volume_override == Some(0) {
        return Err(RegistryError::InvalidTargets("volume override must be >= 1".into()));
    }
    let law = Law::new(&targets.prevalence, targets.age, model);
    let tol = options.tolerance_pp / 100.0;
    let mut records = Vec::new();
    let mut tilts = Vec::new();

    for (h, target) in targets.hospitals.iter().enumerate() {
        let volume = options.volume_override.unwrap_or(target.volume);
        let deaths = match options.volume_override {
            Some(v) => ((target.deaths as f64) * v as f64 / target.volume as f64).round() as usize,
            None => target.deaths,
        }
        .min(volume);
        let goal = target.expected_pct / 100.0;

        let mut best: Option<(f64, f64)> = None;
        let mut accepted = None;
        for attempt in 0..options.max_attempts.max(1) {
            let mut rng = ChaCha20Rng::seed_from_u64(options.seed);
            rng.set_stream(((h as u64) << 16) | u64::from(attempt));
            let uniforms: Vec<PatientUniforms> = (0..volume).map(|_| PatientUniforms::draw(&mut rng)).collect();

            let (mut lo, mut hi) = (-TILT_BRACKET, TILT_BRACKET);
            let (r_lo, _) = realized_rate(&uniforms, &law, lo, &target.id);
            let (r_hi, _) = realized_rate(&uniforms, &law, hi, &target.id);
            if goal < r_lo || goal > r_hi {
                let closest = if goal < r_lo { r_lo } else { r_hi };
                best = Some(best.map_or((lo, closest), |b| if (closest - goal).abs() < (b.1 - goal).abs() { (lo, closest) } else { b }));
                continue;
            }
            let mut shift = 0.0;
            let mut achieved = f64::NAN;
            let mut best_here = f64::INFINITY;
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                let (r, _) = realized_rate(&uniforms, &law, mid, &target.id);
                if (r - goal).abs() < best_here {
                    best_here = (r - goal).abs();
                    shift = mid;
                    achieved = r;
                }
                if r < goal {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if best.map_or(true, |b| (achieved - goal).abs() < (b.1 - goal).abs()) {
                best = Some((shift, achieved));
            }
            if best_here <= tol {
                let (_, mut pts) = realized_rate(&uniforms, &law, shift, &target.id);
                draw_outcomes(&mut pts, model, options.outcome, deaths, &mut rng);
                accepted = Some((shift, achieved, attempt + 1, pts));
                break;
            }
        }
        match accepted {
            Some((shift, achieved, attempts, pts)) => {
                tilts.push(TiltRecord {
                    hospital_id: target.id.clone(),
                    shift,
                    target_expected_pct: target.expected_pct,
                    achieved_expected_pct: 100.0 * achieved,
                    attempts,
                });
                records.extend(pts);
            }
            None => {
                return Err(RegistryError::UnattainableTarget {
                    hospital: target.id.0.clone(),
                    target_pct: target.expected_pct,
                    achieved_pct: 100.0 * best.map_or(f64::NAN, |b| b.1),
                })
            }
        }
    }

    let metadata = GeneratorMetadata {
        seed: options.seed,
        outcome_model: options.outcome,
        intercept: model.intercept,
        coefficients: model.coefficients.clone(),
        covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        age_convention: targets.age,
        tilts,
    };
    Ok((Cohort::new(records)?, metadata))
}

fn draw_outcomes(
    patients: &mut [PatientRecord],
    model: &RiskModel,
    outcome: OutcomeModel,
    deaths: usize,
    rng: &mut impl Rng,
) {
    let p: Vec<f64> = patients.iter().map(|r| expit(model.linear_predictor(&r.design().0))).collect();
    match outcome {
        OutcomeModel::Independent => {
            for (r, &pj) in patients.iter_mut().zip(&p) {
                r.death30 = rng.random::<f64>() < pj;
            }
        }
        OutcomeModel::MatchDeathCounts => {
            // tail[j][r] = P(exactly r deaths among patients j..n) under independence
            let n = patients.len();
            let mut tail = vec![vec![0.0; deaths + 1]; n + 1];
            tail[n][0] = 1.0;
            for j in (0..n).rev() {
                for r in 0..=deaths {
                    let die = if r > 0 { p[j] * tail[j + 1][r - 1] } else { 0.0 };
                    tail[j][r] = (1.0 - p[j]) * tail[j + 1][r] + die;
                }
            }
            let mut remaining = deaths;
            for j in 0..n {
                let die = remaining > 0 && {
                    let num = p[j] * tail[j + 1][remaining - 1];
                    rng.random::<f64>() * tail[j][remaining] < num
                };
                patients[j].death30 = die;
                if die {
                    remaining -= 1;
                }
            }
        }
    }
}

/// Population mean predicted risk under the (tilted) covariate law, by exact
/// enumeration of the discrete factors and Simpson quadrature over age.
pub fn population_expected_rate(
    prevalence: &RiskFactorPrevalence,
    age: AgeConvention,
    model: &RiskModel,
    tilt: f64,
) -> f64 {
    let law = Law::new(prevalence, age, model);
    let tl = law.tilted(tilt);
    let b = &model.coefficients;
    let probs = |cdf: &[f64]| {
        let mut prev = 0.0;
        cdf.iter().map(|&c| { let p = c - prev; prev = c; p }).collect::<Vec<f64>>()
    };
    let ef = probs(&tl.ef_cdf);
    let mi = probs(&tl.mi_cdf);
    let st = probs(&tl.status_cdf);
    let ef_b = [0.0, b[9], b[10]];
    let mi_b = [0.0, b[11], b[12], b[13], b[14], b[15]];
    let st_b = [0.0, b[16], b[17]];

    // age quadrature nodes: latent normal restricted to (0, max) plus the two clamp atoms
    let sd = age.latent_sd;
    let z_lo = (0.0 - tl.age_mean) / sd;
    let z_hi = (age.max - tl.age_mean) / sd;
    let cdf = crate::numeric::normal_cdf;
    let mut nodes: Vec<(f64, f64)> = vec![(0.0, cdf(z_lo)), (age.max, 1.0 - cdf(z_hi))];
    let (a, bnd) = (z_lo.max(-10.0), z_hi.min(10.0));
    if bnd > a {
        let m = 2000;
        let h = (bnd - a) / m as f64;
        for i in 0..=m {
            let z = a + i as f64 * h;
            let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let dens = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            nodes.push((tl.age_mean + sd * z, w * h / 3.0 * dens));
        }
    }

    let mut total = 0.0;
    for mask in 0u32..256 {
        let mut pb = 1.0;
        let mut lp = model.intercept;
        for k in 0..8 {
            if mask & (1 << k) != 0 {
                pb *= tl.binary[k];
                lp += b[1 + k];
            } else {
                pb *= 1.0 - tl.binary[k];
            }
        }
        if pb == 0.0 {
            continue;
        }
        for (e, &pe) in ef.iter().enumerate() {
            for (m, &pm) in mi.iter().enumerate() {
                for (s, &ps) in st.iter().enumerate() {
                    let w = pb * pe * pm * ps;
                    if w == 0.0 {
                        continue;
                    }
                    let c = lp + ef_b[e] + mi_b[m] + st_b[s];
                    let inner: f64 = nodes.iter().map(|&(yrs, wt)| wt * expit(c + b[0] * yrs)).sum();
                    total += w * inner;
                }
            }
        }
    }
    total
}
