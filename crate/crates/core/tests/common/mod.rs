#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use provider_profile::registry::{Cohort, EfCategory, MiCategory, PatientRecord, Status};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Plain IRLS on the columns that vary, written against nalgebra only.
/// Returns (intercept, 18 slopes) with zeros for constant columns.
pub fn irls_oracle(cohort: &Cohort) -> Vec<f64> {
    let designs = cohort.designs();
    let y: Vec<f64> = cohort.outcomes().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let n = designs.len();
    let cols: Vec<usize> = (0..18).filter(|&k| designs.iter().any(|d| d.0[k] != designs[0].0[k])).collect();
    let p = cols.len() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { designs[i].0[cols[j - 1]] });
    let yv = DVector::from_vec(y);
    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let eta = &x * &beta;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.map(|m| m * (1.0 - m));
        let z = DVector::from_fn(n, |i, _| eta[i] + (yv[i] - mu[i]) / w[i]);
        let mut xtw = x.transpose();
        for i in 0..n {
            xtw.column_mut(i).scale_mut(w[i]);
        }
        let next = (&xtw * &x).lu().solve(&(&xtw * z)).expect("oracle solve");
        let delta = (&next - &beta).amax();
        beta = next;
        if delta < 1e-13 {
            break;
        }
    }
    let mut out = vec![0.0; 19];
    out[0] = beta[0];
    for (j, &k) in cols.iter().enumerate() {
        out[k + 1] = beta[j + 1];
    }
    out
}

/// Registry-shaped cohort with independent risk factors and outcomes from
/// `logit p = intercept + hospital_effect[h] + 0.5*shock + 0.05*age + 0.4*urgent_or_emergent`.
pub fn random_cohort(seed: u64, per_hospital: &[usize], intercept: f64, hospital_effect: &[f64]) -> Cohort {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for (h, &n) in per_hospital.iter().enumerate() {
        for _ in 0..n {
            let mut r = PatientRecord {
                hospital_id: format!("h{:02}", h + 1).into(),
                death30: false,
                yrs_over_65: (rng.random::<f64>() * 20.0).floor(),
                male: rng.random_bool(0.7),
                renal_failure: rng.random_bool(0.1),
                diabetes: rng.random_bool(0.35),
                hypertension: rng.random_bool(0.7),
                pvd: rng.random_bool(0.2),
                prior_pci: rng.random_bool(0.2),
                shock: rng.random_bool(0.1),
                iabp: rng.random_bool(0.1),
                ef_cat: EfCategory::ALL[rng.random_range(0..3)],
                mi_cat: MiCategory::ALL[rng.random_range(0..6)],
                status: Status::ALL[rng.random_range(0..3)],
            };
            let eta = intercept
                + hospital_effect.get(h).copied().unwrap_or(0.0)
                + 0.5 * f64::from(u8::from(r.shock))
                + 0.05 * r.yrs_over_65
                + if r.status == Status::Elective { 0.0 } else { 0.4 };
            r.death30 = rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp());
            records.push(r);
        }
    }
    Cohort::new(records).unwrap()
}

/// Cohort whose patients all sit at the reference covariate pattern;
/// `counts[h] = (n, deaths)`.
pub fn bare_cohort(counts: &[(usize, usize)]) -> Cohort {
    let mut records = Vec::new();
    for (h, &(n, d)) in counts.iter().enumerate() {
        for j in 0..n {
            records.push(PatientRecord {
                hospital_id: format!("h{:02}", h + 1).into(),
                death30: j < d,
                yrs_over_65: 0.0,
                male: false,
                renal_failure: false,
                diabetes: false,
                hypertension: false,
                pvd: false,
                prior_pci: false,
                shock: false,
                iabp: false,
                ef_cat: EfCategory::Ge40,
                mi_cat: MiCategory::None,
                status: Status::Elective,
            });
        }
    }
    Cohort::new(records).unwrap()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log int Bin(d | n, expit(b)) N(b; mu, tau^2) db` without the binomial
/// coefficient, by the trapezoid rule on a standardized grid.
fn log_marginal_hospital(n: usize, d: usize, mu: f64, tau: f64) -> f64 {
    let (n, d) = (n as f64, d as f64);
    let h = 0.05;
    let terms: Vec<f64> = (-180..=180)
        .map(|k| {
            let z = k as f64 * h;
            let b = mu + tau * z;
            d * b - n * softplus(b) - 0.5 * z * z
        })
        .collect();
    log_sum_exp(&terms) + h.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Posterior moments of the no-covariate random-intercept model by brute
/// force quadrature over (mu, log tau). `log_prior_tau` is the log density
/// of `tau` itself; `None` fixes `tau` at `fixed_tau`.
pub struct QuadratureMoments {
    pub mu_mean: f64,
    pub mu_sd: f64,
    pub tau2_mean: f64,
}

pub fn hier_quadrature(
    counts: &[(usize, usize)],
    mu_prior_var: f64,
    log_prior_tau: Option<&dyn Fn(f64) -> f64>,
    fixed_tau: f64,
) -> QuadratureMoments {
    let logits: Vec<f64> = counts.iter().map(|&(n, d)| ((d as f64 + 0.5) / (n as f64 - d as f64 + 0.5)).ln()).collect();
    let centre = logits.iter().sum::<f64>() / logits.len() as f64;
    let mus: Vec<f64> = (0..=240).map(|k| centre - 4.0 + 8.0 * k as f64 / 240.0).collect();
    let taus: Vec<(f64, f64)> = match log_prior_tau {
        // (tau, log weight in log-tau coordinates)
        Some(lp) => (0..=300)
            .map(|k| {
                let u = (1e-4f64).ln() + ((3.0f64).ln() - (1e-4f64).ln()) * k as f64 / 300.0;
                let t = u.exp();
                (t, lp(t) + u)
            })
            .collect(),
        None => vec![(fixed_tau, 0.0)],
    };
    let mut logw = Vec::new();
    let mut points = Vec::new();
    for &(t, lw) in &taus {
        if lw == f64::NEG_INFINITY {
            continue;
        }
        for &m in &mus {
            let mut l = lw - 0.5 * m * m / mu_prior_var;
            for &(n, d) in counts {
                l += log_marginal_hospital(n, d, m, t);
            }
            logw.push(l);
            points.push((m, t));
        }
    }
    let z = log_sum_exp(&logw);
    let w: Vec<f64> = logw.iter().map(|l| (l - z).exp()).collect();
    let e = |f: &dyn Fn(f64, f64) -> f64| w.iter().zip(&points).map(|(w, &(m, t))| w * f(m, t)).sum::<f64>();
    let mu_mean = e(&|m, _| m);
    let mu_sd = (e(&|m, _| (m - mu_mean).powi(2))).sqrt();
    QuadratureMoments { mu_mean, mu_sd, tau2_mean: e(&|_, t| t * t) }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Counts of `hospitals` hospitals from a 2PL model with `n` eligible per
/// cell, plus the true qualities.
pub fn simulate_irt(
    seed: u64,
    hospitals: usize,
    n: u64,
    difficulty: &[f64],
    disc: &[f64],
) -> (Vec<Vec<u64>>, Vec<Vec<u64>>, Vec<f64>) {
    use rand_distr::{Binomial, Distribution, StandardNormal};
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..hospitals).map(|_| rng.sample(StandardNormal)).collect();
    let y = theta
        .iter()
        .map(|&t| {
            difficulty
                .iter()
                .zip(disc)
                .map(|(b0, b)| Binomial::new(n, logistic(b0 + b * t)).unwrap().sample(&mut rng))
                .collect()
        })
        .collect();
    (y, vec![vec![n; difficulty.len()]; hospitals], theta)
}

/// Posterior mean of `theta` under a N(0, 1) prior with the measure
/// parameters known, by trapezoid quadrature.
pub fn grid_theta_mean(params: &provider_profile::composite::IrtParams, y: &[u64], n: &[u64]) -> f64 {
    let h = 0.001;
    let pts: Vec<f64> = (0..=12_000).map(|j| -6.0 + h * j as f64).collect();
    let lp: Vec<f64> = pts
        .iter()
        .map(|&t| provider_profile::composite::irt_log_likelihood(params, y, n, t) - 0.5 * t * t)
        .collect();
    let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let last = pts.len() - 1;
    let w: Vec<f64> =
        lp.iter().enumerate().map(|(j, l)| (l - top).exp() * if j == 0 || j == last { 0.5 } else { 1.0 }).collect();
    w.iter().zip(&pts).map(|(w, t)| w * t).sum::<f64>() / w.iter().sum::<f64>()
}
