//! Small dense symmetric linear algebra, generic over the differentiation
//! scalar.
//!
//! The random-effect dimension k and the parameter count np are both tiny
//! (k ≤ ~10, np ≤ ~40), so a plain row-major matrix with an unblocked
//! Cholesky is all that is needed. Being generic over [`Scalar`] lets the
//! same factorization propagate dual derivatives through log-determinants
//! and solves.

use crate::scalar::Scalar;

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMat<S> {
    n: usize,
    data: Vec<S>,
}

impl<S: Scalar> SquareMat<S> {
    pub fn zeros(n: usize) -> Self {
        SquareMat {
            n,
            data: vec![S::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mul_vec(&self, v: &[S]) -> Vec<S> {
        debug_assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| {
                let mut acc = S::zero();
                for j in 0..self.n {
                    acc += self[(i, j)] * v[j];
                }
                acc
            })
            .collect()
    }

    /// Map the value parts into an f64 matrix (drops derivative parts).
    pub fn value_map(&self) -> SquareMat<f64> {
        SquareMat {
            n: self.n,
            data: self.data.iter().map(|s| s.value()).collect(),
        }
    }
}

impl<S> std::ops::Index<(usize, usize)> for SquareMat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.n + j]
    }
}

impl<S> std::ops::IndexMut<(usize, usize)> for SquareMat<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.n + j]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<S> {
    l: SquareMat<S>,
}

impl<S: Scalar> Cholesky<S> {
    /// Factor `a = L Lᵀ`. Returns `None` when a pivot is nonpositive or
    /// non-finite, i.e. the matrix is not numerically positive definite.
    pub fn new(a: &SquareMat<S>) -> Option<Self> {
        let n = a.n;
        let mut l = SquareMat::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[(i, j)];
                for m in 0..j {
                    sum -= l[(i, m)] * l[(j, m)];
                }
                if i == j {
                    let v = sum.value();
                    if !(v > 0.0) || !sum.all_finite() {
                        return None;
                    }
                    l[(i, j)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Some(Cholesky { l })
    }

    pub fn factor(&self) -> &SquareMat<S> {
        &self.l
    }

    /// ln det(A) = 2 Σ ln L_ii.
    pub fn log_det(&self) -> S {
        let mut acc = S::zero();
        for i in 0..self.l.n {
            acc += self.l[(i, i)].ln();
        }
        acc + acc
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[S]) -> Vec<S> {
        let n = self.l.n;
        debug_assert_eq!(b.len(), n);
        // forward: L y = b
        let mut y = vec![S::zero(); n];
        for i in 0..n {
            let mut sum = b[i];
            for m in 0..i {
                sum -= self.l[(i, m)] * y[m];
            }
            y[i] = sum / self.l[(i, i)];
        }
        // backward: Lᵀ x = y
        let mut x = vec![S::zero(); n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for m in (i + 1)..n {
                sum -= self.l[(m, i)] * x[m];
            }
            x[i] = sum / self.l[(i, i)];
        }
        x
    }

    /// Dense inverse of A, column by column.
    pub fn inverse(&self) -> SquareMat<S> {
        let n = self.l.n;
        let mut inv = SquareMat::zeros(n);
        let mut e = vec![S::zero(); n];
        for j in 0..n {
            e[j] = S::one();
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
            e[j] = S::zero();
        }
        inv
    }

    /// Quadratic form bᵀ A⁻¹ b.
    pub fn quad_form_inv(&self, b: &[S]) -> S {
        let x = self.solve(b);
        let mut acc = S::zero();
        for i in 0..b.len() {
            acc += b[i] * x[i];
        }
        acc
    }
}

/// Compensated (Neumaier) summation in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.c
    }
}

/// Deterministic reduction: sort by the f64 total order, then sum with
/// compensation. The result is bitwise independent of the input order and
/// therefore of any parallel schedule that produced the values.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let mut acc = CompensatedSum::default();
    for &v in values.iter() {
        acc.add(v);
    }
    acc.total()
}
