//! Small dense linear-algebra helpers shared by the Gaussian and planning code.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. The Cholesky routine is
//! hand-written so that a failure can report which leading minor broke.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower Cholesky factor together with the diagonal jitter that was needed.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl CholeskyFactor {
    /// `log det(A + jitter I) = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `L z = b` in place.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = b.clone();
        self.l.solve_lower_triangular_mut(&mut z);
        z
    }
}

/// Plain Cholesky. On failure returns the 1-based order of the leading minor
/// that was not positive.
pub fn cholesky_raw(a: &DMatrix<f64>, jitter: f64) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j + 1);
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
    Ok(l)
}

/// Cholesky with the escalating jitter policy: no jitter first, then
/// `1e-10 * trace/n`, growing by 10x up to `1e-4 * trace/n`.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::contract(format!(
            "cholesky of non-square {}x{} matrix",
            n,
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok(CholeskyFactor {
            l: DMatrix::zeros(0, 0),
            jitter: 0.0,
        });
    }
    let first_failure = match cholesky_raw(a, 0.0) {
        Ok(l) => return Ok(CholeskyFactor { l, jitter: 0.0 }),
        Err(minor) => minor,
    };
    let scale = a.trace() / n as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NotPositiveDefinite {
            minor: first_failure,
            dim: n,
            jitter: 0.0,
        });
    }
    let mut jitter = 1e-10 * scale;
    let max_jitter = 1e-4 * scale * (1.0 + 1e-12);
    let mut last_minor = first_failure;
    while jitter <= max_jitter {
        match cholesky_raw(a, jitter) {
            Ok(l) => return Ok(CholeskyFactor { l, jitter }),
            Err(minor) => last_minor = minor,
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        minor: last_minor,
        dim: n,
        jitter: jitter / 10.0,
    })
}

/// Log-determinant of a symmetric positive (semi)definite matrix via jittered Cholesky.
pub fn logdet_spd(a: &DMatrix<f64>) -> Result<f64> {
    Ok(cholesky_jittered(a)?.logdet())
}

/// Maximum relative asymmetry `max|a_ij - a_ji| / max(1, max|a|)`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(1.0);
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Extracts the sub-matrix on the given index set (rows and columns).
pub fn principal_submatrix(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| a[(idx[i], idx[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Block-diagonal assembly.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Upper-triangular factor `R` (min(d,k) x k) with `RᵀR = AᵀA`, from a thin QR.
pub fn gram_root(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(0, a.ncols());
    }
    a.clone().qr().r()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reports_failing_minor() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, -0.5]);
        // minor 2 is singular; jitter rescues it but minor 3 stays negative
        let err = cholesky_jittered(&a).unwrap_err();
        match err {
            Error::NotPositiveDefinite { minor, dim, .. } => {
                assert_eq!(minor, 3);
                assert_eq!(dim, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let f = cholesky_jittered(&a).unwrap();
        assert!(f.jitter > 0.0);
        assert!(f.jitter <= 1e-4 * a.trace() / 3.0 * 1.0001);
    }

    #[test]
    fn logdet_matches_lu() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let ld = logdet_spd(&a).unwrap();
        assert!((ld - a.clone().lu().determinant().ln()).abs() < 1e-12);
    }

    #[test]
    fn gram_root_reproduces_gram() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0, -2.0, 1.0]);
        let r = gram_root(&a);
        let diff = r.transpose() * &r - a.transpose() * &a;
        assert!(diff.amax() < 1e-12);
        let wide = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let r = gram_root(&wide);
        assert_eq!(r.shape(), (1, 3));
        assert!((r.transpose() * &r - wide.transpose() * &wide).amax() < 1e-12);
    }
}
