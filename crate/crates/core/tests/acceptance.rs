//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_RUNS` sets the number of seeded synthetic-cohort runs behind
//! criteria 5 and 6 (default 20); `ACCEPTANCE_ONLY` picks criteria by number.
//! With `ACCEPTANCE_STRICT=1` any failing criterion makes the process exit 1.

mod common;

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{bare_cohort, grid_theta_mean, hier_quadrature, irls_oracle, random_cohort, simulate_irt};
use provider_profile::classical::{fit_logistic_mle, variation_indices, z_outliers, ExtremalQuotient, ZOptions};
use provider_profile::commands::{run, CommandKind, CompositeKind, RunConfig};
use provider_profile::composite::{fit_irt, irt_log_likelihood, pooled_composite, IrtFit, IrtKind, IrtParams, MeasurePanel};
use provider_profile::hiermodel::{
    elicit_half_normal_from_upper, elicit_tau_from_odds_range, log_posterior, log_posterior_gradient, HierData,
    HierParams, HierSpec, PriorSpec,
};
use provider_profile::numeric::binomial_point_and_tail;
use provider_profile::profiling::{
    ppp_replication, profile, FlagCuts, FlagLevel, ProfileOptions, ReplicateIntercepts,
};
use provider_profile::registry::{
    synthesize_cohort, CalibrationTargets, N_COVARIATES, Cohort, HospitalId, PatientRecord, RiskModel, SynthesisOptions,
};
use provider_profile::sampler::{beta0_index, sample_hier, ChainConfig, PosteriorDraws, MU, TAU2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Posterior mean, sd and the Monte Carlo standard errors of both.
fn mc(d: &PosteriorDraws, p: usize) -> (f64, f64, f64, f64) {
    let (m, sd) = mean_sd(&d.pooled(p));
    let ess = d.diagnostics.as_ref().expect("diagnostics")[p].ess;
    (m, sd, sd / ess.sqrt(), sd / (2.0 * ess).sqrt())
}

fn massachusetts(seed: u64) -> Cohort {
    synthesize_cohort(&CalibrationTargets::massachusetts(), &RiskModel::massachusetts(), &SynthesisOptions::new(seed))
        .expect("synthesis")
        .0
}

fn crude_logit(c: &Cohort, i: usize) -> f64 {
    let rows = &c.rows_by_hospital()[i];
    let d = rows.iter().filter(|&&j| c.records()[j].death30).count() as f64;
    let n = rows.len() as f64;
    ((d + 0.5) / (n - d + 0.5)).ln()
}

fn binomial_points() -> Outcome {
    let p = 0.0219;
    let cases = [(26, 0, 0.56), (80, 0, 0.17), (381, 15, 0.01)];
    let mut out = Vec::new();
    let mut ok = true;
    for (n, k, want) in cases {
        let got = binomial_point_and_tail(n, p, k).point;
        ok &= round2(got) == want;
        out.push(format!("P(X={k}|n={n})={got:.4}"));
    }
    check(ok, out.join(", "))
}

fn elicitation() -> Outcome {
    let tau = elicit_tau_from_odds_range(1.48).map_err(|e| e.to_string())?;
    let v = match elicit_half_normal_from_upper(1.0) {
        PriorSpec::HalfNormalOnSd { variance_param } => variance_param,
        other => return Err(format!("unexpected prior {other:?}")),
    };
    // 95th percentile of |N(0, v)| by bisection on its cdf erf(t / sqrt(2v))
    let cdf = |t: f64| statrs::function::erf::erf(t / (2.0 * v).sqrt());
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < 0.95 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q95 = 0.5 * (lo + hi);
    let ok = (tau - 0.100).abs() <= 0.001 && (v - 0.2603).abs() < 5e-5 && (q95 - 1.0).abs() <= 1e-6;
    check(ok, format!("tau {tau:.5}, variance {v:.5}, 95th percentile {q95:.8}"))
}

fn sampler_correctness() -> Outcome {
    let counts = [(20_000, 2_000), (20_000, 2_600), (20_000, 3_300), (20_000, 4_000), (20_000, 5_200), (20_000, 6_100)];
    let (tau, mu_var) = (0.3, 1000.0);
    // exact logistic posterior of mu by quadrature; large n makes it Normal
    let quad = hier_quadrature(&counts, mu_var, None, tau);
    let cfg = ChainConfig { burn_in: 1000, keep: 5000, chains: 4, seed: 11, ..Default::default() };
    let d = sample_hier(&HierSpec::new(PriorSpec::Fixed { tau }), &bare_cohort(&counts), &cfg).map_err(|e| e.to_string())?;
    let (m, sd, se_m, se_sd) = mc(&d, MU);
    let mean_ok = (m - quad.mu_mean).abs() < 3.0 * se_m;
    let sd_ok = (sd - quad.mu_sd).abs() < 3.0 * se_sd;

    // finite differences of the log posterior for every free-tau prior
    let c = random_cohort(31, &[40, 60, 30], -2.0, &[0.2, -0.1, 0.3]);
    let data = HierData::<f64>::from_cohort(&c);
    let mut rng = ChaCha20Rng::seed_from_u64(32);
    let beta1 = (0..N_COVARIATES).map(|_| rng.random_range(-0.3..0.3)).collect();
    let at = HierParams { mu: -1.7, tau2: 0.09, beta1, beta0: vec![-1.5, -1.9, -1.6] };
    let mut worst: f64 = 0.0;
    for prior in PriorSpec::sensitivity_defaults() {
        let spec = HierSpec::new(prior);
        let g = log_posterior_gradient(&at, &spec, &data).map_err(|e| e.to_string())?;
        let flat = |p: &HierParams<f64>| {
            let mut v = vec![p.mu, p.tau2];
            v.extend(&p.beta1);
            v.extend(&p.beta0);
            v
        };
        let unflat = |v: &[f64]| HierParams { mu: v[0], tau2: v[1], beta1: v[2..2 + N_COVARIATES].to_vec(), beta0: v[2 + N_COVARIATES..].to_vec() };
        let x = flat(&at);
        let gx = flat(&g);
        for j in 0..x.len() {
            let h = 1e-5 * x[j].abs().max(1.0);
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (log_posterior(&unflat(&up), &spec, &data).unwrap() - log_posterior(&unflat(&dn), &spec, &data).unwrap())
                / (2.0 * h);
            worst = worst.max((fd - gx[j]).abs() / gx[j].abs().max(1.0));
        }
    }
    check(
        mean_ok && sd_ok && worst <= 1e-5,
        format!(
            "mu mean {m:.5} vs {:.5} (se {se_m:.5}), sd {sd:.5} vs {:.5} (se {se_sd:.5}), gradient rel err {worst:.2e}",
            quad.mu_mean, quad.mu_sd
        ),
    )
}

fn ks_uniform(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n)).fold(0.0, f64::max)
}

fn calibration() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(40);
    let effects: Vec<f64> = (0..50).map(|_| Normal::new(0.0, 0.3).unwrap().sample(&mut rng)).collect();
    let c = random_cohort(41, &[200; 50], -3.0, &effects);
    let cfg = ChainConfig { burn_in: 600, keep: 100, chains: 2, seed: 2, ..Default::default() };
    let spec = HierSpec::new(PriorSpec::UniformOnSd { lo: 0.0, hi: 1.5 });
    let (checks, _) = ppp_replication(&spec, &c, &cfg, ReplicateIntercepts::Redraw).map_err(|e| e.to_string())?;
    let p: Vec<f64> = checks.iter().map(|k| k.p_value).collect();
    let ks = ks_uniform(&p);
    let extreme = p.iter().filter(|&&x| FlagCuts::default().classify(x) == FlagLevel::Extreme).count();
    check(ks < 0.15 && extreme <= 2, format!("KS {ks:.3}, {extreme} flagged at 0.01/0.99"))
}

/// What criteria 5 and 6 need from one seeded synthetic cohort.
struct MaRun {
    shrink_violations: usize,
    tau2: [f64; 3],
    p13_replication: f64,
    p13_crossval: f64,
    min_replication: bool,
    min_crossval: bool,
    tau2_without_13: f64,
    p12_fixed: f64,
    unconverged: Vec<String>,
    fits: usize,
}

fn shrink_violations(c: &Cohort, d: &PosteriorDraws) -> usize {
    let (mu, _, se_mu, _) = mc(d, MU);
    (0..c.n_hospitals())
        .filter(|&i| {
            let (b, _, se_b, _) = mc(d, beta0_index(i));
            (b - mu).abs() > (crude_logit(c, i) - mu).abs() + 3.0 * (se_b + se_mu)
        })
        .count()
}

fn ma_run(seed: u64) -> MaRun {
    let c = massachusetts(seed);
    let cfg = ChainConfig { burn_in: 1000, keep: 2000, chains: 2, seed, joint_fixed_effects: true, ..Default::default() };
    let priors = PriorSpec::sensitivity_defaults();
    let opts = ProfileOptions { crossval: true, in_control_tau: None, ..Default::default() };
    let (main, art) = profile(&HierSpec::new(priors[0]), &c, &cfg, &opts).expect("main fit");
    let mut violations = shrink_violations(&c, &art.draws);
    let mut tau2 = [main.tau2.mean, 0.0, 0.0];
    let mut unconverged: Vec<String> = main.fits.iter().filter(|f| !f.converged).map(|f| f.name.clone()).collect();
    for (k, &prior) in priors.iter().enumerate().skip(1) {
        let d = sample_hier(&HierSpec::new(prior), &c, &cfg).expect("prior fit");
        violations += shrink_violations(&c, &d);
        tau2[k] = d.summary(TAU2).mean;
        if !d.converged {
            unconverged.push(prior.label());
        }
    }
    let fixed_opts = ProfileOptions { crossval: false, in_control_tau: None, ..Default::default() };
    let (fixed, _) = profile(&HierSpec::new(PriorSpec::Fixed { tau: 0.01 }), &c, &cfg, &fixed_opts).expect("fixed fit");

    unconverged.extend(fixed.fits.iter().filter(|f| !f.converged).map(|f| format!("tau=0.01 {}", f.name)));

    let at = |id: &str| c.hospital_index(&HospitalId(id.into())).expect("hospital id");
    let h13 = &main.hospitals[at("13")];
    let rep: Vec<f64> = main.hospitals.iter().map(|h| h.replication.p_value).collect();
    let cv: Vec<f64> = main.hospitals.iter().map(|h| h.crossval.as_ref().unwrap().strategy.p_value).collect();
    let cv13 = h13.crossval.as_ref().unwrap();
    MaRun {
        shrink_violations: violations,
        tau2,
        p13_replication: h13.replication.p_value,
        p13_crossval: cv13.strategy.p_value,
        min_replication: rep.iter().all(|&p| p >= h13.replication.p_value),
        min_crossval: cv.iter().all(|&p| p >= cv13.strategy.p_value),
        tau2_without_13: cv13.tau2_without.mean,
        p12_fixed: fixed.hospitals[at("12")].replication.p_value,
        unconverged,
        fits: main.fits.len() + priors.len() - 1 + fixed.fits.len(),
    }
}

fn shrinkage(runs: &[MaRun]) -> Outcome {
    let violations: usize = runs.iter().map(|r| r.shrink_violations).sum();
    // equal crude rates, tenfold volume gap
    let c = bare_cohort(&[(50, 5), (500, 50), (200, 10), (300, 45), (150, 12), (250, 8)]);
    let cfg = ChainConfig { burn_in: 1000, keep: 4000, chains: 2, seed: 6, ..Default::default() };
    let mut order_ok = true;
    for prior in PriorSpec::sensitivity_defaults() {
        let d = sample_hier(&HierSpec::new(prior), &c, &cfg).map_err(|e| e.to_string())?;
        let (mu, ..) = mc(&d, MU);
        let (small, _, se_s, _) = mc(&d, beta0_index(0));
        let (large, _, se_l, _) = mc(&d, beta0_index(1));
        order_ok &= (small - mu).abs() <= (large - mu).abs() + 3.0 * (se_s + se_l);
    }
    check(
        violations == 0 && order_ok,
        format!("{violations} intercepts beyond their crude logit over {} runs x 3 priors; smaller shrinks more: {order_ok}", runs.len()),
    )
}

fn table_patterns(runs: &[MaRun]) -> Outcome {
    let n = runs.len() as f64;
    let frac = |f: &dyn Fn(&MaRun) -> bool| runs.iter().filter(|r| f(r)).count() as f64 / n;
    let a = frac(&|r| r.tau2[0] <= r.tau2[1] && r.tau2[1] <= r.tau2[2]);
    let b = frac(&|r| r.min_replication && r.min_crossval && r.p13_replication <= 0.10 && r.p13_crossval <= 0.10);
    let c = frac(&|r| r.tau2_without_13 <= 0.75 * r.tau2[0]);
    // the low-rate hospital sits in the lower tail: P(rep >= obs) >= 0.95
    let d = frac(&|r| r.p12_fixed >= 0.95);
    let mean_tau2: Vec<f64> = (0..3).map(|k| runs.iter().map(|r| r.tau2[k]).sum::<f64>() / n).collect();
    let unconverged: usize = runs.iter().map(|r| r.unconverged.len()).sum();
    let p12 = runs.iter().map(|r| r.p12_fixed).sum::<f64>() / n;
    let detail = format!(
        "(a) prior order {:.0}% [need 70], mean tau2 gamma {:.3} unif {:.3} hn {:.3}; (b) {:.0}% [80]; (c) {:.0}% [>50]; (d) {:.0}% [70], mean p {p12:.3}; {unconverged} of {} fits with R-hat above 1.05",
        100.0 * a,
        mean_tau2[0],
        mean_tau2[1],
        mean_tau2[2],
        100.0 * b,
        100.0 * c,
        100.0 * d,
        runs.iter().map(|r| r.fits).sum::<usize>()
    );
    check(a >= 0.70 && b >= 0.80 && c > 0.5 && d >= 0.70, detail)
}

fn fixed_tau_collapse() -> Outcome {
    let c = massachusetts(1);
    let cfg = ChainConfig { burn_in: 500, keep: 1000, chains: 2, seed: 3, joint_fixed_effects: true, ..Default::default() };
    let d = sample_hier(&HierSpec::new(PriorSpec::Fixed { tau: 0.01 }), &c, &cfg).map_err(|e| e.to_string())?;
    let means: Vec<f64> = (0..c.n_hospitals()).map(|i| d.summary(beta0_index(i)).mean).collect();
    let (_, sd) = mean_sd(&means);
    check(sd < 0.02, format!("sd of intercept means {sd:.5}"))
}

fn ids(n: usize) -> Vec<HospitalId> {
    (0..n).map(|i| HospitalId(format!("h{i:02}"))).collect()
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("m{i}")).collect()
}

fn theta_mean_se(fit: &IrtFit, i: usize) -> (f64, f64) {
    let p = fit.theta_index(i);
    let (m, sd) = mean_sd(&fit.draws.pooled(p));
    (m, sd / fit.draws.diagnostics.as_ref().unwrap()[p].ess.sqrt())
}

fn irt_suite() -> Outcome {
    // exact identity: equal totals give a theta-free likelihood gap
    let params = IrtParams { difficulty: vec![-1.2, 0.3, 0.8, 2.0], discrimination: vec![1.7] };
    let (a, b, n4) = ([10, 20, 30, 35], [35, 30, 20, 10], [40; 4]);
    let gap0 = irt_log_likelihood(&params, &b, &n4, 0.0) - irt_log_likelihood(&params, &a, &n4, 0.0);
    let identity = [-3.0, -1.1, 0.4, 2.9]
        .iter()
        .map(|&t| (irt_log_likelihood(&params, &b, &n4, t) - irt_log_likelihood(&params, &a, &n4, t) - gap0).abs())
        .fold(0.0, f64::max);

    let difficulty = [-0.5, 0.0, 0.5, 1.0];
    let (mut y, mut n, _) = simulate_irt(21, 20, 50, &difficulty, &[1.0; 4]);
    y.extend([vec![10, 20, 30, 40], vec![40, 30, 20, 10]]);
    n.extend([vec![50; 4], vec![50; 4]]);
    let panel = MeasurePanel::new(ids(22), names(4), y, n).map_err(|e| e.to_string())?;
    let cfg = ChainConfig { burn_in: 2000, keep: 5000, chains: 4, seed: 2, ..Default::default() };
    let fit = fit_irt(&panel, IrtKind::Rasch, &cfg).map_err(|e| e.to_string())?;
    let ((ta, sa), (tb, sb)) = (theta_mean_se(&fit, 20), theta_mean_se(&fit, 21));
    let equal_theta = (ta - tb).abs() < 3.0 * (sa * sa + sb * sb).sqrt();

    // rank flip: A wins the pooled rate on weak measures, B the strong ones
    let (pa, pb, disc) = ([95u64, 95, 40, 40], [50u64, 50, 75, 75], [0.2, 0.2, 3.0, 3.0]);
    let exact = IrtParams { difficulty: vec![0.0; 4], discrimination: disc.to_vec() };
    let grid_flip = grid_theta_mean(&exact, &pb, &[100; 4]) > grid_theta_mean(&exact, &pa, &[100; 4]);
    let (mut y, mut n, _) = simulate_irt(5, 60, 100, &[0.0; 4], &disc);
    y.extend([pa.to_vec(), pb.to_vec()]);
    n.extend([vec![100; 4], vec![100; 4]]);
    let panel = MeasurePanel::new(ids(62), names(4), y, n).map_err(|e| e.to_string())?;
    let fit = fit_irt(&panel, IrtKind::TwoPl, &ChainConfig { burn_in: 3000, keep: 3000, chains: 2, seed: 7, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let pooled = pooled_composite(&panel).map_err(|e| e.to_string())?;
    let fit_flip = pooled[60].rate > pooled[61].rate && theta_mean_se(&fit, 61).0 > theta_mean_se(&fit, 60).0;

    let difficulty = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
    let truth = [0.5, 0.8, 1.0, 1.3, 1.6, 2.0];
    let (y, n, _) = simulate_irt(11, 60, 150, &difficulty, &truth);
    let panel = MeasurePanel::new(ids(60), names(6), y, n).map_err(|e| e.to_string())?;
    let fit = fit_irt(&panel, IrtKind::TwoPl, &ChainConfig { burn_in: 3000, keep: 4000, chains: 2, seed: 13, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let hits = (0..6)
        .filter(|&k| {
            let (m, sd) = mean_sd(&fit.draws.pooled(6 + k));
            (m - truth[k]).abs() <= 3.0 * sd
        })
        .count();
    check(
        identity < 1e-12 && equal_theta && grid_flip && fit_flip && hits >= 5,
        format!(
            "identity err {identity:.1e}; equal-total theta {ta:.3} vs {tb:.3}; flip exact {grid_flip}, fitted {fit_flip}; discriminations {hits}/6"
        ),
    )
}

fn classical_suite() -> Outcome {
    let c = random_cohort(17, &[100; 5], -1.5, &[0.0, 0.2, -0.2, 0.4, 0.1]);
    let fit = fit_logistic_mle::<f64>(&c).map_err(|e| e.to_string())?;
    let mle_err = fit.coefficients().iter().zip(irls_oracle(&c)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let c = random_cohort(23, &[200; 20], -1.2, &[]);
    let fit = fit_logistic_mle::<f64>(&c).map_err(|e| e.to_string())?;
    let probs: Vec<f64> = c.designs().iter().map(|d| 1.0 / (1.0 + (-fit.linear_predictor(&d.0)).exp())).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let (mut flags, mut total) = (0usize, 0usize);
    for _ in 0..1000 {
        let records: Vec<PatientRecord> = c
            .records()
            .iter()
            .zip(&probs)
            .map(|(r, &p)| PatientRecord { death30: rng.random::<f64>() < p, ..r.clone() })
            .collect();
        let report = z_outliers(&fit, &Cohort::new(records).unwrap(), &ZOptions::default()).map_err(|e| e.to_string())?;
        flags += report.rows.iter().filter(|r| r.flagged).count();
        total += report.rows.len();
    }
    let rate = flags as f64 / total as f64;

    // by hand: mean 0.15, variance 0.005, within (0.0009 + 0.0032) / 2
    let v = variation_indices(&[0.1_f64, 0.2], &[100, 50]).map_err(|e| e.to_string())?;
    let hand = v.extremal_quotient == ExtremalQuotient::Finite(2.0)
        && (v.coefficient_of_variation - 0.005_f64.sqrt() / 0.15).abs() < 1e-15
        && (v.systematic_component - 0.00295).abs() < 1e-15;
    let zero = variation_indices(&[0.0_f64, 0.2], &[100, 50]).map_err(|e| e.to_string())?;
    let unbounded = zero.extremal_quotient == ExtremalQuotient::Unbounded;
    check(
        mle_err <= 1e-6 && (0.03..=0.07).contains(&rate) && hand && unbounded,
        format!("MLE vs oracle {mle_err:.1e}; null flag rate {:.2}%; hand indices {hand}, zero rate unbounded {unbounded}", 100.0 * rate),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let panel = tmp.path().join("panel.csv");
    let (y, _, _) = simulate_irt(3, 15, 60, &[-0.5, 0.3, 1.0], &[0.7, 1.2, 2.0]);
    let mut text = String::from("hospital_id,measure_id,numerator,denominator\n");
    for (i, row) in y.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            text.push_str(&format!("h{i:02},m{k},{v},60\n"));
        }
    }
    std::fs::write(&panel, text).map_err(|e| e.to_string())?;

    let base = RunConfig {
        chain: ChainConfig { burn_in: 300, keep: 300, chains: 2, joint_fixed_effects: true, ..Default::default() },
        seed: 5,
        ..Default::default()
    };
    let mut sim = base.clone();
    sim.command = CommandKind::Simulate;
    sim.out = tmp.path().join("simulate");
    let cohort = sim.out.join("cohort.csv");
    let mut cases = vec![sim];
    for (name, kind) in [("profile", CommandKind::Profile), ("sensitivity", CommandKind::Sensitivity), ("classical", CommandKind::Classical)] {
        let mut c = base.clone();
        c.command = kind;
        c.inputs.cohort = Some(cohort.clone());
        c.out = tmp.path().join(name);
        cases.push(c);
    }
    for kind in [CompositeKind::Pooled, CompositeKind::TwoPl] {
        let mut c = base.clone();
        c.command = CommandKind::Composite;
        c.inputs.panel = Some(panel.clone());
        c.composite.kind = kind;
        c.out = tmp.path().join(format!("composite_{kind:?}"));
        cases.push(c);
    }
    cases[1].profile.crossval = true;

    let mut files = 0;
    let mut differing = Vec::new();
    for cfg in &cases {
        run(cfg).map_err(|e| e.to_string())?;
        let first = snapshot(&cfg.out);
        run(cfg).map_err(|e| e.to_string())?;
        let second = snapshot(&cfg.out);
        files += first.len();
        if first != second {
            differing.push(format!("{:?}", cfg.command));
        }
    }
    check(differing.is_empty(), format!("{} runs, {files} files compared; differing: {differing:?}", cases.len()))
}

fn runs_from_env() -> usize {
    std::env::var("ACCEPTANCE_RUNS").ok().and_then(|s| s.parse().ok()).unwrap_or(20)
}

/// `ACCEPTANCE_ONLY=6,10` restricts the run to the listed criteria.
fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let n_runs = runs_from_env();
    // fitted on first use by criterion 5, shared with 6
    let ma_cell = OnceCell::new();
    let ma = || -> Result<&Vec<MaRun>, String> {
        ma_cell
            .get_or_init(|| {
                catch_unwind(|| (0..n_runs as u64).map(|r| ma_run(100 + r)).collect::<Vec<_>>()).map_err(|e| panic_text(&*e))
            })
            .as_ref()
            .map_err(Clone::clone)
    };

    type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("exact binomial point probabilities", Box::new(binomial_points)),
        ("prior elicitation", Box::new(elicitation)),
        ("sampler correctness", Box::new(sampler_correctness)),
        ("predictive check calibration", Box::new(calibration)),
        ("shrinkage", Box::new(|| shrinkage(ma()?))),
        ("synthetic table patterns", Box::new(|| table_patterns(ma()?))),
        ("fixed-tau collapse", Box::new(fixed_tau_collapse)),
        ("item response models", Box::new(irt_suite)),
        ("classical methods", Box::new(classical_suite)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    let only = selected();
    for (k, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(k + 1))) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Err(format!("panicked: {}", panic_text(&*e))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {}: PASS {name} ({d}) [{secs:.1}s]", k + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({d}) [{secs:.1}s]", k + 1);
            }
        }
    }
    let ran = only.map_or(criteria.len(), |o| o.len());
    println!("{} of {ran} criteria passed in {:.0}s", ran - failed, t0.elapsed().as_secs_f64());
    // failures are reported above; they only fail the process when asked to
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn panic_text(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}
