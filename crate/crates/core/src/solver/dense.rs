//! Dense LU factorization with partial pivoting.
//!
//! The separated-representation heat solver produces one moderate square
//! system per factor block and epoch; the time-derivative term makes those
//! systems nonsymmetric, so the banded Cholesky path does not apply. Row
//! pivoting keeps the elimination stable without assuming any structure.

use crate::error::{Error, Result};

/// Row-major dense square matrix owning its storage.
#[derive(Debug, Clone)]
pub struct DenseMat {
    n: usize,
    a: Vec<f64>,
}

impl DenseMat {
    pub fn zeros(n: usize) -> Self {
        assert!(n > 0, "empty system");
        Self { n, a: vec![0.0; n * n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] += v;
    }

    /// Largest absolute diagonal entry; zero for an all-zero diagonal.
    pub fn max_abs_diag(&self) -> f64 {
        (0..self.n).fold(0.0f64, |m, i| m.max(self.get(i, i).abs()))
    }

    /// Factor in place as P A = L U with partial pivoting. Fails with
    /// [`Error::SingularSystem`] when no usable pivot remains in a column.
    pub fn lu(mut self) -> Result<LuFactors> {
        let n = self.n;
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut best = k;
            let mut mag = self.get(k, k).abs();
            for r in k + 1..n {
                let m = self.get(r, k).abs();
                if m > mag {
                    mag = m;
                    best = r;
                }
            }
            if !(mag > 0.0) || !mag.is_finite() {
                return Err(Error::SingularSystem(k));
            }
            if best != k {
                piv.swap(k, best);
                for j in 0..n {
                    self.a.swap(k * n + j, best * n + j);
                }
            }
            let pivot = self.get(k, k);
            for r in k + 1..n {
                let factor = self.get(r, k) / pivot;
                self.a[r * n + k] = factor;
                for j in k + 1..n {
                    self.a[r * n + j] -= factor * self.a[k * n + j];
                }
            }
        }
        Ok(LuFactors { m: self, piv })
    }
}

/// Factored form of [`DenseMat::lu`]; solves by permuted forward/back
/// substitution.
#[derive(Debug, Clone)]
pub struct LuFactors {
    m: DenseMat,
    piv: Vec<usize>,
}

impl LuFactors {
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.m.n;
        if b.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "rhs length {} does not match system size {n}",
                b.len()
            )));
        }
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.m.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.m.get(i, j) * x[j];
            }
            x[i] = s / self.m.get(i, i);
        }
        Ok(x)
    }
}
