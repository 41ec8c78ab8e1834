//! Seeded Metropolis-within-Gibbs engine.
//!
//! A [`ChainModel`] describes one sweep over its parameters; the engine runs
//! independent chains (one ChaCha20 stream per chain), adapts scalar
//! random-walk scales during burn-in, records kept draws and computes
//! split-R̂ and effective sample size.

mod diagnostics;
mod hier;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diagnostics::{diagnostics, effective_sample_size, split_rhat, ParamDiagnostic};
pub use hier::{beta0_index, beta1_index, sample_hier, HierSampler, HierState, MU, TAU2};

use crate::numeric::Summary;

/// R̂ above this marks a run as not converged.
pub const RHAT_LIMIT: f64 = 1.05;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("log posterior is not finite at the initial state ({0})")]
    NonFiniteLogPosterior(String),
    #[error("need at least 2 chains and 10 kept draws for diagnostics (got {chains} chains, {keep} draws)")]
    InsufficientDraws { chains: usize, keep: usize },
    #[error("invalid chain configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub keep: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    pub adapt_window: usize,
    pub target_acceptance: f64,
    /// Worker cap for parallel chains; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Add one joint proposal (intercept level plus slopes) shaped by the
    /// fixed-effects MLE covariance ahead of the scalar slope updates.
    pub joint_fixed_effects: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            burn_in: 5000,
            keep: 3000,
            thin: 1,
            chains: 4,
            seed: 1,
            adapt_window: 50,
            target_acceptance: 0.44,
            threads: None,
            joint_fixed_effects: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.to_owned()));
        if self.keep < 1 {
            return bad("keep must be >= 1");
        }
        if self.thin < 1 {
            return bad("thin must be >= 1");
        }
        if self.chains < 1 {
            return bad("chains must be >= 1");
        }
        if self.adapt_window < 1 {
            return bad("adapt_window must be >= 1");
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad("target_acceptance must lie in (0, 1)");
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ChainConfig { seed, ..self.clone() }
    }
}

/// Generator for chain `chain` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Metropolis accept step on a log ratio.
#[inline]
pub fn accept(log_ratio: f64, rng: &mut ChaCha20Rng) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() {
        return false;
    }
    rng.random::<f64>().ln() < log_ratio
}

#[derive(Debug, Clone)]
struct AdaptiveScale {
    log_scale: f64,
    target: f64,
    window_tried: u32,
    window_accepted: u32,
    tried: u64,
    accepted: u64,
}

/// Proposal scales for every random-walk update of a model, adapted in
/// windows during burn-in and frozen afterwards.
#[derive(Debug, Clone)]
pub struct Tuner {
    names: Vec<String>,
    scales: Vec<AdaptiveScale>,
    window: usize,
    sweeps: usize,
    batches: usize,
    adapting: bool,
}

impl Tuner {
    fn new(updates: Vec<(String, f64, f64)>, window: usize) -> Self {
        let scales = updates
            .iter()
            .map(|&(_, init, target)| AdaptiveScale {
                log_scale: init.ln(),
                target,
                window_tried: 0,
                window_accepted: 0,
                tried: 0,
                accepted: 0,
            })
            .collect();
        Tuner { names: updates.into_iter().map(|u| u.0).collect(), scales, window, sweeps: 0, batches: 0, adapting: true }
    }

    #[inline]
    pub fn scale(&self, update: usize) -> f64 {
        self.scales[update].log_scale.exp()
    }

    /// Random-walk increment for `update`.
    #[inline]
    pub fn step(&self, update: usize, rng: &mut ChaCha20Rng) -> f64 {
        self.scale(update) * rng.sample::<f64, _>(StandardNormal)
    }

    #[inline]
    pub fn record(&mut self, update: usize, accepted: bool) {
        let s = &mut self.scales[update];
        s.window_tried += 1;
        s.tried += 1;
        if accepted {
            s.window_accepted += 1;
            s.accepted += 1;
        }
    }

    fn end_sweep(&mut self) {
        self.sweeps += 1;
        if !self.adapting || self.sweeps % self.window != 0 {
            return;
        }
        self.batches += 1;
        let delta = (1.0 / (self.batches as f64).sqrt()).min(0.5);
        for s in &mut self.scales {
            if s.window_tried == 0 {
                continue;
            }
            let rate = f64::from(s.window_accepted) / f64::from(s.window_tried);
            s.log_scale += if rate > s.target { delta } else { -delta };
            s.window_tried = 0;
            s.window_accepted = 0;
        }
    }

    fn freeze(&mut self) {
        self.adapting = false;
        for s in &mut self.scales {
            s.tried = 0;
            s.accepted = 0;
        }
    }

    fn acceptance(&self) -> Vec<(String, Option<f64>)> {
        self.names
            .iter()
            .zip(&self.scales)
            .map(|(n, s)| (n.clone(), (s.tried > 0).then(|| s.accepted as f64 / s.tried as f64)))
            .collect()
    }
}

/// A posterior explored by sweeps of Metropolis/Gibbs updates.
pub trait ChainModel: Sync {
    type State: Send;

    /// Names of recorded quantities, one per column of a kept draw.
    fn param_names(&self) -> Vec<String>;

    /// Random-walk updates as `(name, initial scale, target acceptance)`.
    fn updates(&self, cfg: &ChainConfig) -> Vec<(String, f64, f64)>;

    /// Starting state of `chain`; may consume randomness from `rng`.
    fn init(&self, chain: usize, rng: &mut ChaCha20Rng) -> Result<Self::State, SamplerError>;

    fn sweep(&self, state: &mut Self::State, rng: &mut ChaCha20Rng, tuner: &mut Tuner);

    fn record(&self, state: &Self::State, out: &mut Vec<f64>);
}

/// Kept draws of one chain, row-major (`keep` rows of `n_params`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub keep: usize,
    pub chains: Vec<ChainDraws>,
    /// Post-burn-in acceptance rate of every random-walk update, averaged
    /// over chains.
    pub acceptance: BTreeMap<String, f64>,
    /// Per-parameter split-R̂ and ESS; `None` when fewer than two chains or
    /// ten draws make them undefined.
    pub diagnostics: Option<Vec<ParamDiagnostic>>,
    pub converged: bool,
    pub seed: u64,
}

impl PosteriorDraws {
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Value of parameter `p` at kept draw `t` of `chain`.
    #[inline]
    pub fn value(&self, chain: usize, t: usize, p: usize) -> f64 {
        self.chains[chain].values[t * self.names.len() + p]
    }

    /// Draw `t` of `chain` as a slice over all parameters.
    pub fn row(&self, chain: usize, t: usize) -> &[f64] {
        let n = self.names.len();
        &self.chains[chain].values[t * n..(t + 1) * n]
    }

    /// All rows, chain by chain.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let n = self.names.len();
        self.chains.iter().flat_map(move |c| c.values.chunks_exact(n))
    }

    pub fn n_draws(&self) -> usize {
        self.keep * self.chains.len()
    }

    /// Per-chain series of parameter `p`.
    pub fn series(&self, p: usize) -> Vec<Vec<f64>> {
        (0..self.chains.len()).map(|c| (0..self.keep).map(|t| self.value(c, t, p)).collect()).collect()
    }

    /// Pooled draws of `p` across chains.
    pub fn pooled(&self, p: usize) -> Vec<f64> {
        self.series(p).concat()
    }

    pub fn pooled_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.index_of(name).map(|p| self.pooled(p))
    }

    pub fn summary(&self, p: usize) -> Summary {
        Summary::of(&self.pooled(p))
    }

    pub fn diagnostic(&self, name: &str) -> Option<&ParamDiagnostic> {
        self.diagnostics.as_ref()?.iter().find(|d| d.name == name)
    }

    /// Flat CSV `chain,iteration,parameter,value` (iteration counts kept draws from 0).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("chain,iteration,parameter,value\n");
        for (c, chain) in self.chains.iter().enumerate() {
            for (t, row) in chain.values.chunks_exact(self.names.len()).enumerate() {
                for (name, v) in self.names.iter().zip(row) {
                    let _ = writeln!(s, "{c},{t},{},{v}", crate::csv_field(name));
                }
            }
        }
        s
    }

    pub fn summary_table(&self) -> Vec<ParamSummary> {
        (0..self.n_params())
            .map(|p| {
                let s = self.summary(p);
                let d = self.diagnostics.as_ref().map(|d| &d[p]);
                ParamSummary {
                    name: self.names[p].clone(),
                    mean: s.mean,
                    median: s.median,
                    q025: s.lower,
                    q975: s.upper,
                    rhat: d.map(|d| d.rhat),
                    ess: d.map(|d| d.ess),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

fn run_chain<M: ChainModel>(model: &M, cfg: &ChainConfig, chain: usize) -> Result<(ChainDraws, Tuner), SamplerError> {
    let mut rng = chain_rng(cfg.seed, chain);
    let mut state = model.init(chain, &mut rng)?;
    let mut tuner = Tuner::new(model.updates(cfg), cfg.adapt_window);
    for _ in 0..cfg.burn_in {
        model.sweep(&mut state, &mut rng, &mut tuner);
        tuner.end_sweep();
    }
    tuner.freeze();
    let n = model.param_names().len();
    let mut values = Vec::with_capacity(cfg.keep * n);
    for t in 0..cfg.keep * cfg.thin {
        model.sweep(&mut state, &mut rng, &mut tuner);
        if (t + 1) % cfg.thin == 0 {
            let before = values.len();
            model.record(&state, &mut values);
            debug_assert_eq!(values.len() - before, n);
        }
    }
    Ok((ChainDraws { values }, tuner))
}

/// Run `cfg.chains` independent chains of `model`.
pub fn run_chains<M: ChainModel>(model: &M, cfg: &ChainConfig) -> Result<PosteriorDraws, SamplerError> {
    cfg.validate()?;
    let go = || -> Result<Vec<(ChainDraws, Tuner)>, SamplerError> {
        (0..cfg.chains).into_par_iter().map(|c| run_chain(model, cfg, c)).collect()
    };
    let results = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?
            .install(go)?,
        None => go()?,
    };

    let mut acceptance = BTreeMap::new();
    for (_, tuner) in &results {
        for (name, rate) in tuner.acceptance() {
            if let Some(r) = rate {
                *acceptance.entry(name).or_insert(0.0) += r / cfg.chains as f64;
            }
        }
    }
    let mut draws = PosteriorDraws {
        names: model.param_names(),
        keep: cfg.keep,
        chains: results.into_iter().map(|r| r.0).collect(),
        acceptance,
        diagnostics: None,
        converged: true,
        seed: cfg.seed,
    };
    if let Ok(d) = diagnostics(&draws) {
        draws.converged = d.iter().all(|p| p.rhat <= RHAT_LIMIT);
        draws.diagnostics = Some(d);
    }
    Ok(draws)
}
