use serde::{Deserialize, Serialize};

use super::{PosteriorDraws, SamplerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Within-chain variance `W` and `var+` for equal-length chains.
fn variance_components(chains: &[&[f64]]) -> (f64, f64) {
    let n = chains[0].len() as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let b_over_n = if means.len() > 1 { mean_var(&means).1 } else { 0.0 };
    (w, (n - 1.0) / n * w + b_over_n)
}

/// Split-chain potential scale reduction. Each chain is cut in half (the
/// middle draw is dropped for odd lengths).
pub fn split_rhat(series: &[Vec<f64>]) -> f64 {
    let half = series[0].len() / 2;
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * series.len());
    for c in series {
        parts.push(&c[..half]);
        parts.push(&c[c.len() - half..]);
    }
    let (w, var_plus) = variance_components(&parts);
    if w <= 0.0 {
        return if var_plus <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

/// Multi-chain effective sample size from autocorrelations truncated by
/// Geyer's initial monotone positive-pair sequence.
pub fn effective_sample_size(series: &[Vec<f64>]) -> f64 {
    let m = series.len();
    let n = series[0].len();
    let total = (m * n) as f64;
    let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
    let (w, var_plus) = variance_components(&refs);
    if var_plus <= 0.0 {
        return total;
    }
    let means: Vec<f64> = series.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let rho = |lag: usize| -> f64 {
        let mut acov = 0.0;
        for (c, &mu) in series.iter().zip(&means) {
            let s: f64 = c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| (a - mu) * (b - mu)).sum();
            acov += s / n as f64;
        }
        1.0 - (w - acov / m as f64) / var_plus
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    total / tau.max(1.0 / total.log10())
}

/// Split-R̂ and ESS for every parameter.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<Vec<ParamDiagnostic>, SamplerError> {
    if draws.chains.len() < 2 || draws.keep < 10 {
        return Err(SamplerError::InsufficientDraws { chains: draws.chains.len(), keep: draws.keep });
    }
    Ok((0..draws.n_params())
        .map(|p| {
            let s = draws.series(p);
            ParamDiagnostic { name: draws.names[p].clone(), rhat: split_rhat(&s), ess: effective_sample_size(&s) }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ChainDraws;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(seed: u64, chains: usize, n: usize) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        (0..chains).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn white_noise_rhat_near_one() {
        let s = white(1, 4, 2000);
        let r = split_rhat(&s);
        assert!((0.99..=1.01).contains(&r), "{r}");
        let ess = effective_sample_size(&s);
        assert!(ess > 6000.0 && ess < 10_000.0, "{ess}");
    }

    #[test]
    fn separated_constant_chains_diverge() {
        let s = vec![vec![0.0; 100], vec![1.0; 100]];
        assert!(split_rhat(&s) > 10.0);
        let mut noisy = white(2, 2, 100);
        for v in &mut noisy[1] {
            *v += 50.0;
        }
        assert!(split_rhat(&noisy) > 10.0);
        assert_eq!(split_rhat(&[vec![3.0; 20], vec![3.0; 20]]), 1.0);
    }

    #[test]
    fn autocorrelated_chains_have_small_ess() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let phi: f64 = 0.9;
        let s: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = phi * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        // AR(1): tau = (1 + phi) / (1 - phi) = 19
        let ess = effective_sample_size(&s);
        let want = 20_000.0 / 19.0;
        assert!((ess - want).abs() < 0.25 * want, "{ess} vs {want}");
    }

    #[test]
    fn too_few_draws_is_an_error() {
        let d = PosteriorDraws {
            names: vec!["a".into()],
            keep: 5,
            chains: vec![ChainDraws { values: vec![0.0; 5] }, ChainDraws { values: vec![1.0; 5] }],
            acceptance: Default::default(),
            diagnostics: None,
            converged: true,
            seed: 0,
        };
        assert!(matches!(diagnostics(&d), Err(SamplerError::InsufficientDraws { keep: 5, .. })));
    }
}
