//! Small dense symmetric linear algebra for the Newton solver and proposals.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Square matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix<S> {
    dim: usize,
    data: Vec<S>,
}

impl<S: Real> SquareMatrix<S> {
    pub fn zeros(dim: usize) -> Self {
        SquareMatrix { dim, data: vec![S::zero(); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mul_vec(&self, v: &[S]) -> Vec<S> {
        (0..self.dim)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn is_symmetric(&self, tol: S) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn map<T: Real>(&self, f: impl Fn(S) -> T) -> SquareMatrix<T> {
        SquareMatrix { dim: self.dim, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

impl<S> std::ops::Index<(usize, usize)> for SquareMatrix<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.dim + j]
    }
}

impl<S> std::ops::IndexMut<(usize, usize)> for SquareMatrix<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.dim + j]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<S> {
    lower: SquareMatrix<S>,
}

impl<S: Real> Cholesky<S> {
    /// Returns `None` when a pivot is not strictly positive relative to `rel_tol`
    /// times the largest diagonal entry.
    pub fn new(a: &SquareMatrix<S>, rel_tol: S) -> Option<Self> {
        let n = a.dim();
        let scale = (0..n).map(|i| a[(i, i)].abs()).fold(S::zero(), S::max);
        let floor = rel_tol * scale.max(S::min_positive_value());
        let mut l = SquareMatrix::zeros(n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Some(Cholesky { lower: l })
    }

    pub fn lower(&self) -> &SquareMatrix<S> {
        &self.lower
    }

    pub fn solve(&self, b: &[S]) -> Vec<S> {
        let n = self.lower.dim();
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] = y[i] - l[(i, k)] * y[k];
            }
            y[i] = y[i] / l[(i, i)];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] = y[i] - l[(k, i)] * y[k];
            }
            y[i] = y[i] / l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> SquareMatrix<S> {
        let n = self.lower.dim();
        let mut inv = SquareMatrix::zeros(n);
        let mut e = vec![S::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = S::zero());
            e[j] = S::one();
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // symmetrize away round-off
        for i in 0..n {
            for j in 0..i {
                let v = (inv[(i, j)] + inv[(j, i)]) * S::half();
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }
}
