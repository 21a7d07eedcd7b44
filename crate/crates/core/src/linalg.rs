//! Symmetric banded matrices with banded Cholesky factorization.
//!
//! Every linear system in this crate (hat-function Gram matrix, C1 spline
//! mass/stiffness combinations, Backward Euler step matrices) is symmetric
//! positive definite with a small fixed bandwidth, so an O(n b^2) banded
//! LL^T factorization and O(n b) solves cover all of them.

use crate::error::{CoreError, Result};

/// Symmetric banded matrix stored as diagonal plus `bw` sub-diagonals.
///
/// `band[d][i]` holds entry `(i + d, i)` for `d = 0..=bw`.
#[derive(Debug, Clone)]
pub struct SymBanded {
    n: usize,
    bw: usize,
    band: Vec<Vec<f64>>,
}

impl SymBanded {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let band = (0..=bw).map(|d| vec![0.0; n.saturating_sub(d)]).collect();
        Self { n, bw, band }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Entry (i, j); zero outside the band. Symmetric access.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        if d > self.bw {
            0.0
        } else {
            self.band[d][lo]
        }
    }

    /// Adds `v` to entry (i, j) and, implicitly, to (j, i).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        assert!(d <= self.bw, "entry ({i},{j}) outside bandwidth {}", self.bw);
        self.band[d][lo] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        assert!(d <= self.bw, "entry ({i},{j}) outside bandwidth {}", self.bw);
        self.band[d][lo] = v;
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = self.band[0][i] * x[i];
            for d in 1..=self.bw {
                if i >= d {
                    acc += self.band[d][i - d] * x[i - d];
                }
                if i + d < self.n {
                    acc += self.band[d][i] * x[i + d];
                }
            }
            y[i] = acc;
        }
    }

    /// x^T A y without allocating.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        let mut acc = 0.0;
        for i in 0..self.n {
            let mut row = self.band[0][i] * y[i];
            for d in 1..=self.bw {
                if i >= d {
                    row += self.band[d][i - d] * y[i - d];
                }
                if i + d < self.n {
                    row += self.band[d][i] * y[i + d];
                }
            }
            acc += x[i] * row;
        }
        acc
    }

    /// Sum of all matrix entries.
    pub fn entry_sum(&self) -> f64 {
        let mut s: f64 = self.band[0].iter().sum();
        for d in 1..=self.bw {
            s += 2.0 * self.band[d].iter().sum::<f64>();
        }
        s
    }

    /// Banded Cholesky factorization A = L L^T.
    ///
    /// Fails with `Internal` if a pivot is non-positive, i.e. the matrix is
    /// not numerically positive definite.
    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let n = self.n;
        let bw = self.bw;
        let mut l = self.band.clone();
        for j in 0..n {
            let mut diag = l[0][j];
            let kmin = j.saturating_sub(bw);
            for k in kmin..j {
                let v = l[j - k][k];
                diag -= v * v;
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(CoreError::Internal(format!(
                    "Cholesky pivot {diag:e} at column {j} is not positive"
                )));
            }
            let dsqrt = diag.sqrt();
            l[0][j] = dsqrt;
            let imax = (j + bw).min(n - 1);
            for i in (j + 1)..=imax {
                let mut v = l[i - j][j];
                let kmin = i.saturating_sub(bw);
                for k in kmin..j {
                    if j - k <= bw && i - k <= bw {
                        v -= l[i - k][k] * l[j - k][k];
                    }
                }
                l[i - j][j] = v / dsqrt;
            }
        }
        Ok(BandedCholesky { n, bw, band: l })
    }
}

/// Lower-triangular banded Cholesky factor.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: Vec<Vec<f64>>,
}

impl BandedCholesky {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Factor entry L(i, j); zero outside the band or above the diagonal.
    pub fn factor_get(&self, i: usize, j: usize) -> f64 {
        if i < j || i - j > self.bw {
            0.0
        } else {
            self.band[i - j][j]
        }
    }

    /// Solves A x = b in place (forward then backward substitution).
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let bw = self.bw;
        for i in 0..n {
            let mut v = b[i];
            let jmin = i.saturating_sub(bw);
            for j in jmin..i {
                v -= self.band[i - j][j] * b[j];
            }
            b[i] = v / self.band[0][i];
        }
        for i in (0..n).rev() {
            let mut v = b[i];
            let jmax = (i + bw).min(n - 1);
            for j in (i + 1)..=jmax {
                v -= self.band[j - i][i] * b[j];
            }
            b[i] = v / self.band[0][i];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// y = L x, used to draw correlated Gaussian vectors.
    pub fn factor_matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for i in (0..self.n).rev() {
            let mut acc = 0.0;
            let jmin = i.saturating_sub(self.bw);
            for j in jmin..=i {
                acc += self.band[i - j][j] * x[j];
            }
            y[i] = acc;
        }
    }
}
