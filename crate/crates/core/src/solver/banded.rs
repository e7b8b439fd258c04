//! Symmetric banded positive definite systems.
//!
//! Stiffness matrices from 1D patch assembly couple only nodes whose patches
//! overlap, so the halfwidth is small and fixed by the scheme. Storage keeps
//! the lower band row by row; factorization is an in-band Cholesky that
//! fails with the offending row index when a pivot is not positive, which in
//! this crate always signals an assembly bug rather than bad data.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix, row-major.
///
/// Entry (i, j) with `j <= i` and `i - j <= hw` lives at
/// `rows[i * (hw + 1) + hw - (i - j)]`; the diagonal sits at offset `hw`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    hw: usize,
    rows: Vec<f64>,
}

impl BandedSpd {
    /// Zero matrix of size `n` with halfwidth `hw`.
    pub fn zeros(n: usize, hw: usize) -> Self {
        Self {
            n,
            hw,
            rows: vec![0.0; n * (hw + 1)],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn halfwidth(&self) -> usize {
        self.hw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.hw);
        i * (self.hw + 1) + self.hw - (i - j)
    }

    /// Symmetric read; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.hw {
            0.0
        } else {
            self.rows[self.slot(r, c)]
        }
    }

    /// Symmetric accumulate. Panics if (i, j) falls outside the band, since
    /// assembly decides the halfwidth up front.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        assert!(
            r - c <= self.hw,
            "entry ({i}, {j}) outside halfwidth {}",
            self.hw
        );
        let s = self.slot(r, c);
        self.rows[s] += v;
    }

    /// Upper bound on the spectral radius via Gershgorin row sums.
    pub fn gershgorin_bound(&self) -> f64 {
        let mut bound: f64 = 0.0;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.hw);
            let hi = (i + self.hw).min(self.n - 1);
            let row_sum: f64 = (lo..=hi).map(|j| self.get(i, j).abs()).sum();
            bound = bound.max(row_sum);
        }
        bound
    }

    /// y = A x, using the symmetric band.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.hw);
            // Off-diagonal entries contribute to both halves.
            for j in lo..i {
                let a = self.rows[self.slot(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.rows[self.slot(i, i)] * x[i];
        }
        y
    }

    /// In-band Cholesky factor A = L L^T.
    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let mut l = self.clone();
        for i in 0..self.n {
            let lo = i.saturating_sub(self.hw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(self.hw));
                let mut sum = l.rows[l.slot(i, j)];
                for k in klo..j {
                    sum -= l.rows[l.slot(i, k)] * l.rows[l.slot(j, k)];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::NotPositiveDefinite(i));
                    }
                    let s = l.slot(i, i);
                    l.rows[s] = sum.sqrt();
                } else {
                    let s = l.slot(i, j);
                    l.rows[s] = sum / l.rows[l.slot(j, j)];
                }
            }
        }
        Ok(BandedCholesky { l })
    }
}

/// Cholesky factor of a [`BandedSpd`], ready to solve.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    l: BandedSpd,
}

impl BandedCholesky {
    /// Solve A x = b via forward and back substitution.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.l.n;
        let hw = self.l.hw;
        if b.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "rhs has {} entries, system has {n}",
                b.len()
            )));
        }
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(hw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l.rows[self.l.slot(i, k)] * y[k];
            }
            y[i] = s / self.l.rows[self.l.slot(i, i)];
        }
        for i in (0..n).rev() {
            let hi = (i + hw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.l.rows[self.l.slot(k, i)] * y[k];
            }
            y[i] = s / self.l.rows[self.l.slot(i, i)];
        }
        Ok(y)
    }
}
