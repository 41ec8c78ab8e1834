use serde::{Deserialize, Serialize};

use super::ClassicalError;
use crate::linalg::{Cholesky, SquareMatrix};
use crate::numeric::{bernoulli_logit_ll, expit};
use crate::registry::{Cohort, N_COVARIATES};
use crate::scalar::Real;

const SEPARATION_BOUND: f64 = 15.0;
const MAX_HALVINGS: usize = 10;

/// Fixed-effects logistic fit: `logit p = intercept + slopes . x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct FixedFit<S> {
    pub intercept: S,
    pub slopes: Vec<S>,
    /// Inverse observed information over (intercept, slopes). Rows and
    /// columns of inactive slopes are zero.
    pub covariance: SquareMatrix<S>,
    /// Slopes estimated from data. Constant columns are not identifiable
    /// next to the intercept and are pinned at zero.
    pub active: Vec<bool>,
    pub log_likelihood: S,
    pub converged: bool,
    pub iterations: usize,
}

impl<S: Real> FixedFit<S> {
    pub fn linear_predictor(&self, x: &[S]) -> S {
        self.intercept + x.iter().zip(&self.slopes).map(|(&a, &b)| a * b).sum::<S>()
    }

    /// Coefficient vector `(intercept, slopes...)`.
    pub fn coefficients(&self) -> Vec<S> {
        std::iter::once(self.intercept).chain(self.slopes.iter().copied()).collect()
    }

    pub fn standard_errors(&self) -> Vec<S> {
        (0..self.covariance.dim()).map(|i| self.covariance[(i, i)].sqrt()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl NewtonOptions {
    pub fn for_scalar<S: Real>(n_rows: usize) -> Self {
        let eps = S::epsilon().as_f64();
        NewtonOptions {
            max_iterations: 50,
            gradient_tolerance: 1e-8_f64.max(100.0 * eps * n_rows as f64),
        }
    }
}

/// Dense design in row-major order with its outcomes.
#[derive(Debug, Clone)]
pub struct DesignMatrix<S> {
    pub n_cols: usize,
    pub values: Vec<S>,
    pub outcomes: Vec<bool>,
}

impl<S: Real> DesignMatrix<S> {
    pub fn from_cohort(cohort: &Cohort) -> Self {
        let mut values = Vec::with_capacity(cohort.len() * N_COVARIATES);
        for d in cohort.designs() {
            values.extend(d.0.iter().map(|&v| S::lit(v)));
        }
        DesignMatrix { n_cols: N_COVARIATES, values, outcomes: cohort.outcomes() }
    }

    pub fn n_rows(&self) -> usize {
        self.outcomes.len()
    }

    pub fn row(&self, j: usize) -> &[S] {
        &self.values[j * self.n_cols..(j + 1) * self.n_cols]
    }
}

pub fn fit_logistic_mle<S: Real>(cohort: &Cohort) -> Result<FixedFit<S>, ClassicalError> {
    let design = DesignMatrix::from_cohort(cohort);
    fit_logistic(&design, NewtonOptions::for_scalar::<S>(design.n_rows()))
}

/// Damped Newton–Raphson on the logistic log-likelihood. Each step is halved
/// (up to ten times) while it lowers the log-likelihood.
pub fn fit_logistic<S: Real>(design: &DesignMatrix<S>, opts: NewtonOptions) -> Result<FixedFit<S>, ClassicalError> {
    let n = design.n_rows();
    let deaths = design.outcomes.iter().filter(|&&y| y).count();
    if deaths == 0 || deaths == n {
        return Err(ClassicalError::DegenerateOutcome { deaths, n });
    }

    let p = design.n_cols;
    let active: Vec<bool> = (0..p)
        .map(|k| {
            let first = design.row(0)[k];
            (1..n).any(|j| design.row(j)[k] != first)
        })
        .collect();
    let cols: Vec<usize> = (0..p).filter(|&k| active[k]).collect();
    let dim = cols.len() + 1;

    let features = |j: usize| -> Vec<S> {
        let row = design.row(j);
        std::iter::once(S::one()).chain(cols.iter().map(|&k| row[k])).collect()
    };
    let rows: Vec<Vec<S>> = (0..n).map(features).collect();
    let eta_of = |theta: &[S], f: &[S]| f.iter().zip(theta).map(|(&a, &b)| a * b).sum::<S>();
    let loglik = |theta: &[S]| -> S {
        rows.iter().zip(&design.outcomes).map(|(f, &y)| bernoulli_logit_ll(y, eta_of(theta, f))).sum()
    };

    let rate = S::from_usize_lossy(deaths) / S::from_usize_lossy(n);
    let mut theta = vec![S::zero(); dim];
    theta[0] = (rate / (S::one() - rate)).ln();
    let mut ll = loglik(&theta);
    let tol = S::lit(opts.gradient_tolerance);
    let mut converged = false;
    let mut iterations = 0;
    let mut info;

    loop {
        let mut grad = vec![S::zero(); dim];
        info = SquareMatrix::zeros(dim);
        for (f, &y) in rows.iter().zip(&design.outcomes) {
            let mu = expit(eta_of(&theta, f));
            let resid = if y { S::one() - mu } else { -mu };
            let w = mu * (S::one() - mu);
            for a in 0..dim {
                grad[a] += resid * f[a];
                let wa = w * f[a];
                for b in 0..=a {
                    info[(a, b)] += wa * f[b];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let max_grad = grad.iter().fold(S::zero(), |m, g| m.max(g.abs()));
        if max_grad <= tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;

        let chol = Cholesky::new(&info, S::lit(1e-12)).ok_or(ClassicalError::RankDeficient)?;
        let step = chol.solve(&grad);
        let mut scale = S::one();
        let mut next: Vec<S> = theta.iter().zip(&step).map(|(&t, &s)| t + s).collect();
        let mut next_ll = loglik(&next);
        for _ in 0..MAX_HALVINGS {
            if next_ll >= ll {
                break;
            }
            scale *= S::half();
            next = theta.iter().zip(&step).map(|(&t, &s)| t + scale * s).collect();
            next_ll = loglik(&next);
        }
        if let Some(k) = next.iter().position(|c| c.abs().as_f64() > SEPARATION_BOUND) {
            let name = if k == 0 { "intercept".to_owned() } else { crate::registry::COVARIATE_NAMES[cols[k - 1]].to_owned() };
            return Err(ClassicalError::Separation { coefficient: name });
        }
        if next_ll < ll {
            // no ascent direction left at working precision
            break;
        }
        theta = next;
        ll = next_ll;
    }

    let cov_active = Cholesky::new(&info, S::lit(1e-12)).ok_or(ClassicalError::RankDeficient)?.inverse();
    let mut covariance = SquareMatrix::zeros(p + 1);
    let full_index: Vec<usize> = std::iter::once(0).chain(cols.iter().map(|&k| k + 1)).collect();
    for a in 0..dim {
        for b in 0..dim {
            covariance[(full_index[a], full_index[b])] = cov_active[(a, b)];
        }
    }
    let mut slopes = vec![S::zero(); p];
    for (i, &k) in cols.iter().enumerate() {
        slopes[k] = theta[i + 1];
    }
    Ok(FixedFit {
        intercept: theta[0],
        slopes,
        covariance,
        active,
        log_likelihood: ll,
        converged,
        iterations,
    })
}

/// Score vector of the logistic log-likelihood over `(intercept, slopes)`.
pub fn score<S: Real>(design: &DesignMatrix<S>, intercept: S, slopes: &[S]) -> Vec<S> {
    let mut g = vec![S::zero(); design.n_cols + 1];
    for j in 0..design.n_rows() {
        let x = design.row(j);
        let eta = intercept + x.iter().zip(slopes).map(|(&a, &b)| a * b).sum::<S>();
        let r = if design.outcomes[j] { S::one() } else { S::zero() } - expit(eta);
        g[0] += r;
        for k in 0..design.n_cols {
            g[k + 1] += r * x[k];
        }
    }
    g
}
