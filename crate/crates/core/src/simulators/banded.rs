//! Banded Cholesky for the symmetric positive definite stencil systems.

use crate::error::{Error, Result};

/// Symmetric banded matrix stored by lower diagonals: `band[i][k] = A[i][i-k]`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bw: bandwidth,
            band: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn at(&self, i: usize, k: usize) -> usize {
        i * (self.bw + 1) + k
    }

    /// Adds `v` to `A[i][j]` (and its mirror); requires `|i − j| ≤ bandwidth`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(r - c <= self.bw);
        let idx = self.at(r, r - c);
        self.band[idx] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            y[i] += self.band[self.at(i, 0)] * x[i];
            for k in 1..=self.bw.min(i) {
                let a = self.band[self.at(i, k)];
                if a != 0.0 {
                    y[i] += a * x[i - k];
                    y[i - k] += a * x[i];
                }
            }
        }
        y
    }

    pub fn factor(&self) -> Result<BandedCholesky> {
        let bw = self.bw;
        let mut l = self.band.clone();
        let at = |i: usize, k: usize| i * (bw + 1) + k;
        for i in 0..self.n {
            for k in (1..=bw.min(i)).rev() {
                // L[i][j] with j = i - k
                let j = i - k;
                let mut s = l[at(i, k)];
                for t in 1..=bw.min(j) {
                    if k + t > bw {
                        break;
                    }
                    s -= l[at(i, k + t)] * l[at(j, t)];
                }
                l[at(i, k)] = s / l[at(j, 0)];
            }
            let mut d = l[at(i, 0)];
            for k in 1..=bw.min(i) {
                d -= l[at(i, k)] * l[at(i, k)];
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    minor: i + 1,
                    dim: self.n,
                    jitter: 0.0,
                });
            }
            l[at(i, 0)] = d.sqrt();
        }
        Ok(BandedCholesky { n: self.n, bw, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let bw = self.bw;
        let at = |i: usize, k: usize| i * (bw + 1) + k;
        let mut y = b.to_vec();
        for i in 0..self.n {
            let mut s = y[i];
            for k in 1..=bw.min(i) {
                s -= self.l[at(i, k)] * y[i - k];
            }
            y[i] = s / self.l[at(i, 0)];
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in 1..=bw.min(self.n - 1 - i) {
                s -= self.l[at(i + k, k)] * y[i + k];
            }
            y[i] = s / self.l[at(i, 0)];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_solve() {
        let n = 6;
        let mut a = BandedSpd::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let b = a.matvec(&x);
        let sol = a.factor().unwrap().solve(&b);
        assert!(sol.iter().zip(&x).all(|(u, v)| (u - v).abs() < 1e-12));
    }

    #[test]
    fn wide_band_with_interior_zeros() {
        let n = 9;
        let bw = 3;
        let mut a = BandedSpd::zeros(n, bw);
        for i in 0..n {
            a.add(i, i, 4.0);
            if i >= 1 {
                a.add(i, i - 1, -1.0);
            }
            if i >= 3 {
                a.add(i, i - 3, -1.0);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let sol = a.factor().unwrap().solve(&a.matvec(&x));
        assert!(sol.iter().zip(&x).all(|(u, v)| (u - v).abs() < 1e-12));
    }

    #[test]
    fn indefinite_reports_minor() {
        let mut a = BandedSpd::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 0, 2.0);
        a.add(1, 1, 1.0);
        assert!(matches!(
            a.factor(),
            Err(Error::NotPositiveDefinite { minor: 2, .. })
        ));
    }
}
