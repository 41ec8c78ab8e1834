//! Fixed-effects risk adjustment and the historical outlier screens:
//! observed-versus-expected z-scores, O/E standardized rates with exact
//! intervals, small-area variation indices and exact binomial tails.

mod mle;

use serde::{Deserialize, Serialize};

pub use mle::{fit_logistic, fit_logistic_mle, score, DesignMatrix, FixedFit, NewtonOptions};
pub use crate::numeric::{binomial_point_and_tail, BinomialTail};

use crate::numeric::{clopper_pearson, expit};
use crate::registry::{Cohort, HospitalId};
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum ClassicalError {
    #[error("outcome is degenerate ({deaths} deaths of {n}); need at least one death and one survivor")]
    DegenerateOutcome { deaths: usize, n: usize },
    #[error("quasi-separation: coefficient `{coefficient}` diverged beyond 15 on the log-odds scale")]
    Separation { coefficient: String },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("hospital {0}: fitted probabilities have zero variance")]
    ZeroVariance(HospitalId),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

/// Mean fitted probability per hospital (in cohort hospital order).
pub fn expected_rate_fixed<S: Real>(fit: &FixedFit<S>, cohort: &Cohort) -> Vec<S> {
    let mut sum = vec![S::zero(); cohort.n_hospitals()];
    let mut n = vec![0usize; cohort.n_hospitals()];
    for (d, &h) in cohort.designs().iter().zip(cohort.hospital_of()) {
        let x: Vec<S> = d.0.iter().map(|&v| S::lit(v)).collect();
        sum[h] += expit(fit.linear_predictor(&x));
        n[h] += 1;
    }
    sum.into_iter().zip(n).map(|(s, k)| s / S::from_usize_lossy(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    /// Flag only higher-than-expected mortality.
    Upper,
    /// Flag `|z|` above the threshold.
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZOptions {
    pub threshold: f64,
    pub sidedness: Sidedness,
    /// Add the delta-method contribution of coefficient uncertainty to the
    /// variance of `observed - expected`.
    pub propagate_coefficient_uncertainty: bool,
}

impl Default for ZOptions {
    fn default() -> Self {
        ZOptions { threshold: 1.645, sidedness: Sidedness::Upper, propagate_coefficient_uncertainty: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZRow<S> {
    pub hospital_id: HospitalId,
    pub n: usize,
    pub observed: S,
    pub expected: S,
    pub z: S,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZReport<S> {
    pub rows: Vec<ZRow<S>>,
    pub threshold: f64,
    pub sidedness: Sidedness,
}

/// Standardized observed-minus-expected rate per hospital.
///
/// The variance of `ybar_i - yhat_i` is `sum_j p_ij (1 - p_ij) / n_i^2`, the
/// binomial variance of the observed rate under fitted probabilities.
pub fn z_outliers<S: Real>(
    fit: &FixedFit<S>,
    cohort: &Cohort,
    opts: &ZOptions,
) -> Result<ZReport<S>, ClassicalError> {
    let h_count = cohort.n_hospitals();
    let dim = fit.slopes.len() + 1;
    let mut n = vec![0usize; h_count];
    let mut deaths = vec![0usize; h_count];
    let mut psum = vec![S::zero(); h_count];
    let mut vsum = vec![S::zero(); h_count];
    let mut grad = vec![vec![S::zero(); dim]; h_count];
    for ((r, d), &h) in cohort.records().iter().zip(cohort.designs()).zip(cohort.hospital_of()) {
        let x: Vec<S> = d.0.iter().map(|&v| S::lit(v)).collect();
        let p = expit(fit.linear_predictor(&x));
        let w = p * (S::one() - p);
        n[h] += 1;
        deaths[h] += usize::from(r.death30);
        psum[h] += p;
        vsum[h] += w;
        if opts.propagate_coefficient_uncertainty {
            grad[h][0] += w;
            for k in 0..x.len() {
                grad[h][k + 1] += w * x[k];
            }
        }
    }
    let mut rows = Vec::with_capacity(h_count);
    for h in 0..h_count {
        let nf = S::from_usize_lossy(n[h]);
        let observed = S::from_usize_lossy(deaths[h]) / nf;
        let expected = psum[h] / nf;
        let mut var = vsum[h] / (nf * nf);
        if opts.propagate_coefficient_uncertainty {
            let g: Vec<S> = grad[h].iter().map(|&v| v / nf).collect();
            let cg = fit.covariance.mul_vec(&g);
            var += g.iter().zip(&cg).map(|(&a, &b)| a * b).sum::<S>();
        }
        if !(var > S::zero()) {
            return Err(ClassicalError::ZeroVariance(cohort.hospital_ids()[h].clone()));
        }
        let z = (observed - expected) / var.sqrt();
        let t = S::lit(opts.threshold);
        let flagged = match opts.sidedness {
            Sidedness::Upper => z > t,
            Sidedness::TwoSided => z.abs() > t,
        };
        rows.push(ZRow { hospital_id: cohort.hospital_ids()[h].clone(), n: n[h], observed, expected, z, flagged });
    }
    Ok(ZReport { rows, threshold: opts.threshold, sidedness: opts.sidedness })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OeRow {
    pub hospital_id: HospitalId,
    pub n: usize,
    pub deaths: usize,
    pub observed_pct: f64,
    pub expected_pct: f64,
    pub standardized_pct: f64,
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub flagged: bool,
}

/// Indirectly standardized rate `(ybar_i / yhat_i) * ybar` in percent with
/// a 95% Clopper–Pearson interval on the death count scaled by `ybar / yhat_i`.
/// Flagged when the interval excludes the pooled rate.
pub fn oe_standardized<S: Real>(fit: &FixedFit<S>, cohort: &Cohort) -> Vec<OeRow> {
    let expected: Vec<f64> = expected_rate_fixed(fit, cohort).into_iter().map(Real::as_f64).collect();
    oe_from_expected(cohort, &expected)
}

/// O/E rows for externally supplied expected rates (proportions, hospital order).
pub fn oe_from_expected(cohort: &Cohort, expected: &[f64]) -> Vec<OeRow> {
    let pooled = cohort.crude_rate();
    let summary = crate::registry::summarize(cohort);
    summary
        .hospitals
        .iter()
        .zip(expected)
        .map(|(h, &e)| {
            let observed = h.deaths as f64 / h.n as f64;
            let (lo, hi) = clopper_pearson(h.deaths as u64, h.n as u64, 0.95);
            let scale = pooled / e * 100.0;
            let lower = lo * scale;
            let upper = hi * scale;
            OeRow {
                hospital_id: h.hospital_id.clone(),
                n: h.n,
                deaths: h.deaths,
                observed_pct: 100.0 * observed,
                expected_pct: 100.0 * e,
                standardized_pct: observed * scale,
                lower_pct: lower,
                upper_pct: upper,
                flagged: 100.0 * pooled < lower || 100.0 * pooled > upper,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ExtremalQuotient<S> {
    Finite(S),
    /// The minimum rate is zero.
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationIndices<S> {
    pub extremal_quotient: ExtremalQuotient<S>,
    pub coefficient_of_variation: S,
    pub systematic_component: S,
}

/// Extremal quotient, coefficient of variation and systematic component of
/// variation of institution rates (proportions).
///
/// Total variance uses the `I - 1` divisor; the within-institution part is
/// the mean binomial variance `r_i (1 - r_i) / n_i`.
pub fn variation_indices<S: Real>(rates: &[S], volumes: &[usize]) -> Result<VariationIndices<S>, ClassicalError> {
    if rates.len() < 2 || rates.len() != volumes.len() {
        return Err(ClassicalError::DegenerateInput("need matching rates and volumes for >= 2 institutions".into()));
    }
    if volumes.iter().any(|&v| v == 0) {
        return Err(ClassicalError::DegenerateInput("volumes must be >= 1".into()));
    }
    if rates.iter().all(|r| *r == S::zero()) {
        return Err(ClassicalError::DegenerateInput("all rates are zero".into()));
    }
    let count = S::from_usize_lossy(rates.len());
    let max = rates.iter().copied().fold(S::neg_infinity(), S::max);
    let min = rates.iter().copied().fold(S::infinity(), S::min);
    let extremal_quotient =
        if min == S::zero() { ExtremalQuotient::Unbounded } else { ExtremalQuotient::Finite(max / min) };
    let mean = rates.iter().copied().sum::<S>() / count;
    let total_var = rates.iter().map(|&r| (r - mean) * (r - mean)).sum::<S>() / (count - S::one());
    let within = rates
        .iter()
        .zip(volumes)
        .map(|(&r, &n)| r * (S::one() - r) / S::from_usize_lossy(n))
        .sum::<S>()
        / count;
    Ok(VariationIndices {
        extremal_quotient,
        coefficient_of_variation: total_var.sqrt() / mean,
        systematic_component: (total_var - within).max(S::zero()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::tests::patient;
    use crate::registry::PatientRecord;
    use approx::assert_abs_diff_eq;

    fn intercept_only_cohort(deaths: usize, n: usize) -> Cohort {
        Cohort::new((0..n).map(|j| patient(if j % 2 == 0 { "a" } else { "b" }, j < deaths)).collect()).unwrap()
    }

    #[test]
    fn intercept_only_fit_is_crude_logit() {
        let c = intercept_only_cohort(101, 4603);
        let fit = fit_logistic_mle::<f64>(&c).unwrap();
        let p: f64 = 101.0 / 4603.0;
        assert_abs_diff_eq!(fit.intercept, (p / (1.0 - p)).ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(fit.intercept, -3.80, epsilon = 0.005);
        assert!(fit.active.iter().all(|a| !a));
        assert!(fit.converged);
        for e in expected_rate_fixed(&fit, &c) {
            assert_abs_diff_eq!(e, p, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_survivors_is_degenerate() {
        let c = intercept_only_cohort(0, 50);
        assert!(matches!(fit_logistic_mle::<f64>(&c), Err(ClassicalError::DegenerateOutcome { .. })));
    }

    #[test]
    fn perfect_predictor_is_separation() {
        let recs: Vec<PatientRecord> = (0..60)
            .map(|j| {
                let mut p = patient("a", j % 3 == 0);
                p.shock = j % 3 == 0;
                p.male = j % 2 == 0;
                p
            })
            .collect();
        let c = Cohort::new(recs).unwrap();
        assert!(matches!(fit_logistic_mle::<f64>(&c), Err(ClassicalError::Separation { .. })));
    }

    #[test]
    fn aliased_columns_are_rank_deficient() {
        let recs: Vec<PatientRecord> = (0..80)
            .map(|j| {
                let mut p = patient("a", j % 5 == 0 || j % 7 == 0);
                p.male = j % 2 == 0;
                p.diabetes = j % 2 == 0;
                p
            })
            .collect();
        let c = Cohort::new(recs).unwrap();
        assert!(matches!(fit_logistic_mle::<f64>(&c), Err(ClassicalError::RankDeficient)));
    }

    #[test]
    fn single_patient_at_zero_has_rate_half() {
        let fit = FixedFit::<f64> {
            intercept: 0.0,
            slopes: vec![0.0; 18],
            covariance: crate::linalg::SquareMatrix::identity(19),
            active: vec![true; 18],
            log_likelihood: 0.0,
            converged: true,
            iterations: 0,
        };
        let c = Cohort::new(vec![patient("x", false)]).unwrap();
        assert_eq!(expected_rate_fixed(&fit, &c), vec![0.5]);
    }

    fn constant_fit(p: f64) -> FixedFit<f64> {
        FixedFit {
            intercept: (p / (1.0 - p)).ln(),
            slopes: vec![0.0; 18],
            covariance: crate::linalg::SquareMatrix::zeros(19),
            active: vec![false; 18],
            log_likelihood: 0.0,
            converged: true,
            iterations: 0,
        }
    }

    #[test]
    fn hand_computed_z_score() {
        let c = Cohort::new((0..100).map(|j| patient("h", j < 8)).collect()).unwrap();
        let r = z_outliers(&constant_fit(0.02), &c, &ZOptions::default()).unwrap();
        let want = (0.08 - 0.02) / (0.0196_f64 / 100.0).sqrt();
        assert_abs_diff_eq!(r.rows[0].z, want, epsilon = 1e-9);
        assert_abs_diff_eq!(r.rows[0].z, 4.29, epsilon = 0.005);
        assert!(r.rows[0].flagged);
    }

    #[test]
    fn z_is_zero_when_observed_equals_expected_and_antisymmetric() {
        let c = Cohort::new((0..50).map(|j| patient("h", j < 5)).collect()).unwrap();
        let r = z_outliers(&constant_fit(0.1), &c, &ZOptions::default()).unwrap();
        assert_abs_diff_eq!(r.rows[0].z, 0.0, epsilon = 1e-9);
        assert!(!r.rows[0].flagged);

        let hi = Cohort::new((0..50).map(|j| patient("h", j < 8)).collect()).unwrap();
        let lo = Cohort::new((0..50).map(|j| patient("h", j < 2)).collect()).unwrap();
        let zh = z_outliers(&constant_fit(0.1), &hi, &ZOptions::default()).unwrap().rows[0].z;
        let zl = z_outliers(&constant_fit(0.1), &lo, &ZOptions::default()).unwrap().rows[0].z;
        assert_abs_diff_eq!(zh, -zl, epsilon = 1e-12);
        let two = ZOptions { sidedness: Sidedness::TwoSided, ..ZOptions::default() };
        assert!(z_outliers(&constant_fit(0.1), &lo, &two).unwrap().rows[0].flagged == (zl.abs() > 1.645));
    }

    #[test]
    fn coefficient_uncertainty_only_widens() {
        let recs: Vec<PatientRecord> = (0..400)
            .map(|j| {
                let mut p = patient(if j < 200 { "a" } else { "b" }, (j * 7919) % 13 == 0);
                p.male = j % 3 == 0;
                p.yrs_over_65 = (j % 11) as f64;
                p
            })
            .collect();
        let c = Cohort::new(recs).unwrap();
        let fit = fit_logistic_mle::<f64>(&c).unwrap();
        let plain = z_outliers(&fit, &c, &ZOptions::default()).unwrap();
        let wide = ZOptions { propagate_coefficient_uncertainty: true, ..ZOptions::default() };
        let full = z_outliers(&fit, &c, &wide).unwrap();
        for (a, b) in plain.rows.iter().zip(&full.rows) {
            assert!(b.z.abs() <= a.z.abs() + 1e-12);
        }
    }

    #[test]
    fn zero_variance_is_an_error() {
        let c = Cohort::new((0..10).map(|_| patient("h", false)).collect()).unwrap();
        let mut fit = constant_fit(0.5);
        fit.intercept = -800.0;
        assert!(matches!(z_outliers(&fit, &c, &ZOptions::default()), Err(ClassicalError::ZeroVariance(_))));
    }

    #[test]
    fn oe_rates_for_reference_hospitals() {
        // pooled rate 2.19%: hospital a on expectation, hospital b (26 cases) with no deaths
        let mut recs: Vec<PatientRecord> = (0..4577).map(|j| patient("a", j < 101)).collect();
        recs.extend((0..26).map(|_| patient("b", false)));
        let c = Cohort::new(recs).unwrap();
        let pooled = 101.0 / 4603.0;
        let rows = oe_from_expected(&c, &[101.0 / 4577.0, pooled]);
        assert_abs_diff_eq!(rows[0].standardized_pct, 100.0 * pooled, epsilon = 1e-10);
        assert_eq!(rows[1].standardized_pct, 0.0);
        assert!(rows[1].upper_pct > 2.19);
        assert_abs_diff_eq!(rows[1].upper_pct, 100.0 * (1.0 - 0.025f64.powf(1.0 / 26.0)), epsilon = 1e-8);
        assert!(!rows[1].flagged);

        let doubled = oe_from_expected(&c, &[2.0 * 101.0 / 4577.0, 2.0 * pooled]);
        for (a, b) in rows.iter().zip(&doubled) {
            assert_abs_diff_eq!(b.standardized_pct, a.standardized_pct / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn variation_indices_by_hand() {
        let v = variation_indices(&[0.02_f64, 0.04], &[1000, 1000]).unwrap();
        assert_eq!(v.extremal_quotient, ExtremalQuotient::Finite(2.0));
        // mean 0.03, sample variance ((0.01)^2 * 2) / 1 = 2e-4, sd = 0.014142...
        assert_abs_diff_eq!(v.coefficient_of_variation, 2e-4_f64.sqrt() / 0.03, epsilon = 1e-15);
        let within = (0.02 * 0.98 / 1000.0 + 0.04 * 0.96 / 1000.0) / 2.0;
        assert_abs_diff_eq!(v.systematic_component, 2e-4 - within, epsilon = 1e-15);
        // binomial noise exceeds the spread at n = 100
        let noisy = variation_indices(&[0.02_f64, 0.04], &[100, 100]).unwrap();
        assert_eq!(noisy.systematic_component, 0.0);

        let same = variation_indices(&[0.05_f64, 0.05, 0.05], &[10, 20, 30]).unwrap();
        assert_eq!(same.extremal_quotient, ExtremalQuotient::Finite(1.0));
        assert_abs_diff_eq!(same.coefficient_of_variation, 0.0, epsilon = 1e-12);
        assert_eq!(same.systematic_component, 0.0);

        let zero_min = variation_indices(&[0.0_f64, 0.04], &[26, 100]).unwrap();
        assert_eq!(zero_min.extremal_quotient, ExtremalQuotient::Unbounded);
        assert!(variation_indices(&[0.0_f64, 0.0], &[1, 1]).is_err());
        assert!(variation_indices(&[0.1_f64], &[1]).is_err());
    }

    #[test]
    fn f32_instantiation_tracks_f64() {
        let c = intercept_only_cohort(30, 400);
        let a = fit_logistic_mle::<f32>(&c).unwrap();
        let b = fit_logistic_mle::<f64>(&c).unwrap();
        assert!((a.intercept as f64 - b.intercept).abs() < 1e-4);
        let v32 = variation_indices(&[0.02_f32, 0.04], &[100, 100]).unwrap();
        assert_eq!(v32.extremal_quotient, ExtremalQuotient::Finite(2.0));
    }
}
