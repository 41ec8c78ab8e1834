//! Rasch and two-parameter logistic models of hospital quality.
//!
//! `logit p_ik = b0_k + b_k * theta_i` with `theta_i ~ N(0, 1)`,
//! `b0_k ~ N(0, 100)` and discriminations `b_k ~ half-Normal(1)`. Higher
//! `theta` means more patients receive needed therapy; negate `theta` for
//! the difficulty-minus form. The Rasch model shares one discrimination.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CompositeError, MeasurePanel};
use crate::numeric::{expit, log1pexp, Summary};
use crate::registry::HospitalId;
use crate::sampler::{accept, run_chains, ChainConfig, ChainModel, PosteriorDraws, SamplerError, Tuner};

const DIFFICULTY_PRIOR_VAR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrtKind {
    Rasch,
    TwoPl,
}

impl IrtKind {
    pub fn label(self) -> &'static str {
        match self {
            IrtKind::Rasch => "rasch",
            IrtKind::TwoPl => "2pl",
        }
    }
}

/// Measure parameters. `discrimination` has one entry for Rasch, `K` for 2PL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtParams {
    pub difficulty: Vec<f64>,
    pub discrimination: Vec<f64>,
}

impl IrtParams {
    #[inline]
    pub fn slope(&self, k: usize) -> f64 {
        if self.discrimination.len() == 1 {
            self.discrimination[0]
        } else {
            self.discrimination[k]
        }
    }
}

/// Binomial log-likelihood of one hospital's counts at quality `theta`,
/// without the binomial coefficients.
pub fn irt_log_likelihood(params: &IrtParams, y: &[u64], n: &[u64], theta: f64) -> f64 {
    let mut ll = 0.0;
    for k in 0..y.len() {
        let eta = params.difficulty[k] + params.slope(k) * theta;
        ll += y[k] as f64 * eta - n[k] as f64 * log1pexp(eta);
    }
    ll
}

/// An item response posterior over a validated panel.
#[derive(Debug, Clone)]
pub struct IrtModel {
    kind: IrtKind,
    panel: MeasurePanel,
    y: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct IrtState {
    difficulty: Vec<f64>,
    log_disc: Vec<f64>,
    theta: Vec<f64>,
}

impl IrtModel {
    pub fn new(panel: MeasurePanel, kind: IrtKind) -> Self {
        let y = (0..panel.n_hospitals()).map(|i| (0..panel.n_measures()).map(|k| panel.y(i, k) as f64).collect()).collect();
        let n = (0..panel.n_hospitals()).map(|i| (0..panel.n_measures()).map(|k| panel.n(i, k) as f64).collect()).collect();
        IrtModel { kind, panel, y, n }
    }

    pub fn panel(&self) -> &MeasurePanel {
        &self.panel
    }

    fn n_disc(&self) -> usize {
        match self.kind {
            IrtKind::Rasch => 1,
            IrtKind::TwoPl => self.panel.n_measures(),
        }
    }

    #[inline]
    fn slope(&self, s: &IrtState, k: usize) -> f64 {
        s.log_disc[if s.log_disc.len() == 1 { 0 } else { k }].exp()
    }

    #[inline]
    fn cell(&self, i: usize, k: usize, eta: f64) -> f64 {
        self.y[i][k] * eta - self.n[i][k] * log1pexp(eta)
    }

    fn hospital_ll(&self, s: &IrtState, i: usize, theta: f64) -> f64 {
        (0..self.panel.n_measures()).map(|k| self.cell(i, k, s.difficulty[k] + self.slope(s, k) * theta)).sum()
    }

    /// Log-likelihood of measure `k` across hospitals at difficulty `b0`
    /// and slope `b`.
    fn measure_ll(&self, s: &IrtState, k: usize, b0: f64, b: f64) -> f64 {
        (0..self.panel.n_hospitals()).map(|i| self.cell(i, k, b0 + b * s.theta[i])).sum()
    }

    /// Unnormalised log posterior with discriminations on their natural
    /// scale, for parameters `params` and qualities `theta`.
    pub fn log_posterior(&self, params: &IrtParams, theta: &[f64]) -> f64 {
        let mut lp = 0.0;
        for (i, &t) in theta.iter().enumerate() {
            let y: Vec<u64> = (0..self.panel.n_measures()).map(|k| self.panel.y(i, k)).collect();
            let n: Vec<u64> = (0..self.panel.n_measures()).map(|k| self.panel.n(i, k)).collect();
            lp += irt_log_likelihood(params, &y, &n, t) - 0.5 * t * t;
        }
        lp -= params.difficulty.iter().map(|b| 0.5 * b * b / DIFFICULTY_PRIOR_VAR).sum::<f64>();
        for &b in &params.discrimination {
            if b <= 0.0 {
                return f64::NEG_INFINITY;
            }
            lp -= 0.5 * b * b;
        }
        lp
    }

    fn update_theta(&self, s: &mut IrtState, rng: &mut ChaCha20Rng, tuner: &mut Tuner) {
        for i in 0..s.theta.len() {
            let old = s.theta[i];
            let new = old + tuner.step(i, rng);
            let log_ratio =
                self.hospital_ll(s, i, new) - self.hospital_ll(s, i, old) - 0.5 * (new * new - old * old);
            let ok = accept(log_ratio, rng);
            tuner.record(i, ok);
            if ok {
                s.theta[i] = new;
            }
        }
    }

    fn update_difficulty(&self, s: &mut IrtState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, u0: usize) {
        for k in 0..s.difficulty.len() {
            let b = self.slope(s, k);
            let old = s.difficulty[k];
            let new = old + tuner.step(u0 + k, rng);
            let log_ratio = self.measure_ll(s, k, new, b) - self.measure_ll(s, k, old, b)
                - 0.5 * (new * new - old * old) / DIFFICULTY_PRIOR_VAR;
            let ok = accept(log_ratio, rng);
            tuner.record(u0 + k, ok);
            if ok {
                s.difficulty[k] = new;
            }
        }
    }

    /// Log-scale walk on each discrimination; `+ log b` is the Jacobian.
    fn update_discrimination(&self, s: &mut IrtState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, u0: usize) {
        let k_all = self.panel.n_measures();
        for d in 0..s.log_disc.len() {
            let old = s.log_disc[d];
            let new = old + tuner.step(u0 + d, rng);
            let (bo, bn) = (old.exp(), new.exp());
            let measures: Vec<usize> = if s.log_disc.len() == 1 { (0..k_all).collect() } else { vec![d] };
            let mut log_ratio = -0.5 * (bn * bn - bo * bo) + (new - old);
            for k in measures {
                log_ratio += self.measure_ll(s, k, s.difficulty[k], bn) - self.measure_ll(s, k, s.difficulty[k], bo);
            }
            let ok = accept(log_ratio, rng);
            tuner.record(u0 + d, ok);
            if ok {
                s.log_disc[d] = new;
            }
        }
    }

    /// Moves that leave the likelihood unchanged: rescale `theta` against
    /// the discriminations, and shift `theta` against the difficulties.
    fn update_scale_and_shift(&self, s: &mut IrtState, rng: &mut ChaCha20Rng, tuner: &mut Tuner, u0: usize) {
        let ss: f64 = s.theta.iter().map(|t| t * t).sum();
        let e = tuner.step(u0, rng);
        let ssd: f64 = s.log_disc.iter().map(|l| (2.0 * l).exp()).sum();
        let i = s.theta.len() as f64;
        // theta -> theta e^-e, b -> b e^e; Jacobian e^(-I e) on theta
        let log_ratio = -0.5 * ss * ((-2.0 * e).exp() - 1.0) - 0.5 * ssd * ((2.0 * e).exp() - 1.0)
            + s.log_disc.len() as f64 * e
            - i * e;
        let ok = accept(log_ratio, rng);
        tuner.record(u0, ok);
        if ok {
            let f = (-e).exp();
            s.theta.iter_mut().for_each(|t| *t *= f);
            s.log_disc.iter_mut().for_each(|l| *l += e);
        }

        let delta = tuner.step(u0 + 1, rng);
        let new_diff: Vec<f64> = (0..s.difficulty.len()).map(|k| s.difficulty[k] - self.slope(s, k) * delta).collect();
        let theta_term: f64 = s.theta.iter().map(|t| (t + delta).powi(2) - t * t).sum();
        let diff_term: f64 = new_diff.iter().zip(&s.difficulty).map(|(n, o)| n * n - o * o).sum();
        let log_ratio = -0.5 * theta_term - 0.5 * diff_term / DIFFICULTY_PRIOR_VAR;
        let ok = accept(log_ratio, rng);
        tuner.record(u0 + 1, ok);
        if ok {
            s.theta.iter_mut().for_each(|t| *t += delta);
            s.difficulty = new_diff;
        }
    }

    fn params_of(&self, s: &IrtState) -> IrtParams {
        IrtParams { difficulty: s.difficulty.clone(), discrimination: s.log_disc.iter().map(|l| l.exp()).collect() }
    }
}

impl ChainModel for IrtModel {
    type State = IrtState;

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.panel.measures().iter().map(|m| format!("difficulty[{m}]")).collect();
        match self.kind {
            IrtKind::Rasch => names.push("discrimination".into()),
            IrtKind::TwoPl => names.extend(self.panel.measures().iter().map(|m| format!("discrimination[{m}]"))),
        }
        names.extend(self.panel.hospitals().iter().map(|h| format!("theta[{}]", h.0)));
        names
    }

    fn updates(&self, _cfg: &ChainConfig) -> Vec<(String, f64, f64)> {
        let mut u: Vec<(String, f64, f64)> =
            self.panel.hospitals().iter().map(|h| (format!("theta[{}]", h.0), 0.5, 0.44)).collect();
        u.extend(self.panel.measures().iter().map(|m| (format!("difficulty[{m}]"), 0.1, 0.44)));
        u.extend((0..self.n_disc()).map(|d| (format!("discrimination[{d}]"), 0.1, 0.44)));
        u.push(("scale".into(), 0.05, 0.44));
        u.push(("shift".into(), 0.05, 0.44));
        u
    }

    fn init(&self, chain: usize, rng: &mut ChaCha20Rng) -> Result<IrtState, SamplerError> {
        let k_all = self.panel.n_measures();
        let difficulty = (0..k_all)
            .map(|k| {
                let y: f64 = self.y.iter().map(|r| r[k]).sum();
                let n: f64 = self.n.iter().map(|r| r[k]).sum();
                ((y + 0.5) / (n - y + 0.5)).ln()
            })
            .collect();
        let mut s = IrtState { difficulty, log_disc: vec![0.0; self.n_disc()], theta: vec![0.0; self.panel.n_hospitals()] };
        if chain > 0 {
            let mut z = || rng.sample::<f64, _>(StandardNormal);
            s.theta.iter_mut().for_each(|t| *t = 0.5 * z());
            s.difficulty.iter_mut().for_each(|b| *b += 0.2 * z());
            s.log_disc.iter_mut().for_each(|l| *l = 0.3 * z());
        }
        let lp = self.log_posterior(&self.params_of(&s), &s.theta);
        if !lp.is_finite() {
            return Err(SamplerError::NonFiniteLogPosterior(format!("chain {chain}: {lp}")));
        }
        Ok(s)
    }

    fn sweep(&self, s: &mut IrtState, rng: &mut ChaCha20Rng, tuner: &mut Tuner) {
        let i_all = s.theta.len();
        let k_all = s.difficulty.len();
        self.update_theta(s, rng, tuner);
        self.update_difficulty(s, rng, tuner, i_all);
        self.update_discrimination(s, rng, tuner, i_all + k_all);
        self.update_scale_and_shift(s, rng, tuner, i_all + k_all + s.log_disc.len());
    }

    fn record(&self, s: &IrtState, out: &mut Vec<f64>) {
        out.extend_from_slice(&s.difficulty);
        out.extend(s.log_disc.iter().map(|l| l.exp()));
        out.extend_from_slice(&s.theta);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtFit {
    pub kind: IrtKind,
    pub hospitals: Vec<HospitalId>,
    /// Measures kept in the model.
    pub measures: Vec<String>,
    /// Measures left out because every hospital scored 0 or every hospital
    /// scored full marks on them.
    pub dropped: Vec<String>,
    pub warnings: Vec<String>,
    pub difficulty: Vec<Summary>,
    /// One entry for Rasch, one per kept measure for 2PL.
    pub discrimination: Vec<Summary>,
    pub theta: Vec<Summary>,
    pub draws: PosteriorDraws,
}

impl IrtFit {
    /// Posterior-mean measure parameters.
    pub fn mean_params(&self) -> IrtParams {
        IrtParams {
            difficulty: self.difficulty.iter().map(|s| s.mean).collect(),
            discrimination: self.discrimination.iter().map(|s| s.mean).collect(),
        }
    }

    /// Column of `theta` for hospital `i` in the draws.
    pub fn theta_index(&self, i: usize) -> usize {
        self.difficulty.len() + self.discrimination.len() + i
    }

    /// `hospital_id,mean,median,lower,upper` of every hospital's quality.
    pub fn theta_csv(&self) -> String {
        let mut s = String::from("hospital_id,mean,median,lower,upper\n");
        for (h, t) in self.hospitals.iter().zip(&self.theta) {
            s.push_str(&format!("{},{},{},{},{}\n", crate::csv_field(&h.0), t.mean, t.median, t.lower, t.upper));
        }
        s
    }
}

/// Fit a Rasch or 2PL model. Measures on which every hospital scored 0, or
/// every hospital scored full marks, are dropped first.
pub fn fit_irt(panel: &MeasurePanel, kind: IrtKind, cfg: &ChainConfig) -> Result<IrtFit, CompositeError> {
    if panel.n_measures() < 2 {
        return Err(CompositeError::InvalidPanel(format!("item response models need at least 2 measures, got {}", panel.n_measures())));
    }
    if panel.n_hospitals() < 3 {
        return Err(CompositeError::InvalidPanel(format!("item response models need at least 3 hospitals, got {}", panel.n_hospitals())));
    }
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    for (k, m) in panel.measures().iter().enumerate() {
        let y: u64 = (0..panel.n_hospitals()).map(|i| panel.y(i, k)).sum();
        let n: u64 = (0..panel.n_hospitals()).map(|i| panel.n(i, k)).sum();
        if y == 0 || y == n {
            dropped.push(m.clone());
            warnings.push(format!("measure {m} dropped: {y} of {n} eligible patients treated across all hospitals"));
        } else {
            keep.push(k);
        }
    }
    if keep.len() < 2 {
        return Err(CompositeError::DegeneratePanel(format!(
            "{} informative measure(s) left after dropping {}",
            keep.len(),
            dropped.join(", ")
        )));
    }
    let reduced = if dropped.is_empty() { panel.clone() } else { panel.select_measures(&keep)? };
    let model = IrtModel::new(reduced, kind);
    let draws = run_chains(&model, cfg)?;
    let k_all = model.panel().n_measures();
    let nd = model.n_disc();
    Ok(IrtFit {
        kind,
        hospitals: model.panel().hospitals().to_vec(),
        measures: model.panel().measures().to_vec(),
        dropped,
        warnings,
        difficulty: (0..k_all).map(|p| draws.summary(p)).collect(),
        discrimination: (k_all..k_all + nd).map(|p| draws.summary(p)).collect(),
        theta: (0..model.panel().n_hospitals()).map(|i| draws.summary(k_all + nd + i)).collect(),
        draws,
    })
}

/// Item characteristic curve of one measure at posterior-mean parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccCurve {
    pub measure: String,
    pub difficulty: f64,
    pub discrimination: f64,
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
}

impl IccCurve {
    /// Quality at which the curve crosses one half.
    pub fn midpoint(&self) -> f64 {
        -self.difficulty / self.discrimination
    }
}

pub fn icc_data(fit: &IrtFit, grid: &[f64]) -> Vec<IccCurve> {
    let params = fit.mean_params();
    fit.measures
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let (b0, b) = (params.difficulty[k], params.slope(k));
            IccCurve {
                measure: m.clone(),
                difficulty: b0,
                discrimination: b,
                theta: grid.to_vec(),
                p: grid.iter().map(|&t| expit(b0 + b * t)).collect(),
            }
        })
        .collect()
}

/// `measure,theta,p` rows of every curve.
pub fn icc_csv(curves: &[IccCurve]) -> String {
    let mut s = String::from("measure,theta,p\n");
    for c in curves {
        for (t, p) in c.theta.iter().zip(&c.p) {
            s.push_str(&format!("{},{t},{p}\n", crate::csv_field(&c.measure)));
        }
    }
    s
}
