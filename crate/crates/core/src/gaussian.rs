//! Gaussian entropy and mutual-information primitives.
//!
//! All entropies are in nats. The projected-output routines never build the
//! `d x d` output covariance: for `y = A h + ξ`, `ξ ~ N(0, τ I_d)`,
//!
//! ```text
//! log det(τ I_d + A Σ Aᵀ) = d log τ + log det(I + R Σ Rᵀ / τ),
//! ```
//!
//! where `RᵀR = AᵀA` comes from a thin QR of `A`. The right-hand side is the
//! determinant identity `det(I + XY) = det(I + YX)` applied to
//! `X = A`, `Y = Σ Aᵀ / τ`, symmetrised through the Gram root so that a
//! Cholesky factorisation is always available (the matrix is `≥ I`).

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_jittered};

/// Roundoff band within which a negative mutual information is clamped to zero.
pub const MI_CLAMP_TOLERANCE: f64 = 1e-8;

const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Mean and covariance of a finite-dimensional Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(Error::contract(format!(
                "covariance shape {:?} does not match mean length {n}",
                cov.shape()
            )));
        }
        let asym = linalg::asymmetry(&cov);
        if asym > SYMMETRY_TOLERANCE {
            return Err(Error::contract(format!(
                "covariance not symmetric (relative asymmetry {asym:e})"
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Zero-mean belief.
    pub fn centered(cov: DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        Self::new(DVector::zeros(n), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal over the listed coordinates, in the given order.
    pub fn marginal(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.dim()) {
            return Err(Error::contract(format!(
                "index {bad} out of range for dimension {}",
                self.dim()
            )));
        }
        Ok(Self {
            mean: linalg::subvector(&self.mean, idx),
            cov: linalg::principal_submatrix(&self.cov, idx),
        })
    }
}

/// `0.5 (n log(2πe) + log det Σ)`.
pub fn entropy(belief: &GaussianBelief) -> Result<f64> {
    let n = belief.dim() as f64;
    let logdet = cholesky_jittered(&belief.cov)?.logdet();
    Ok(0.5 * (n * (2.0 * PI * E).ln() + logdet))
}

/// `log det(τ I_d + A Σ Aᵀ)` without materialising the `d x d` matrix.
pub fn logdet_lowrank(
    noise_var: f64,
    projection: &DMatrix<f64>,
    latent_cov: &DMatrix<f64>,
) -> Result<f64> {
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::Domain(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    let k = projection.ncols();
    if latent_cov.shape() != (k, k) {
        return Err(Error::contract(format!(
            "latent covariance {:?} does not match projection with {k} columns",
            latent_cov.shape()
        )));
    }
    let d = projection.nrows() as f64;
    let root = linalg::gram_root(projection) / noise_var.sqrt();
    Ok(d * noise_var.ln() + whitened_logdet(&root, latent_cov)?)
}

/// `log det(I + R Σ Rᵀ)`.
fn whitened_logdet(root: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let inner = root * cov * root.transpose();
    let mut m = linalg::symmetrize(&inner);
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0;
    }
    Ok(cholesky_jittered(&m)?.logdet())
}

/// Applies the clamping policy to a raw mutual-information value.
pub fn clamp_mi(raw: f64) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::Numerical(format!(
            "mutual information is not finite ({raw})"
        )));
    }
    if raw >= 0.0 {
        Ok(raw)
    } else if raw > -MI_CLAMP_TOLERANCE {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!(
            "mutual information materially negative ({raw:e})"
        )))
    }
}

fn check_partition(n: usize, a: &[usize], b: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in a.iter().chain(b) {
        if i >= n {
            return Err(Error::contract(format!("index {i} out of range for {n}")));
        }
        if seen[i] {
            return Err(Error::contract(format!(
                "index {i} appears twice in partition"
            )));
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::contract(format!(
            "partition does not cover index {missing}"
        )));
    }
    Ok(())
}

/// `I(a; b) = H(a) + H(b) - H(a, b)` for a partition of the joint's coordinates.
pub fn mutual_information(joint: &GaussianBelief, a: &[usize], b: &[usize]) -> Result<f64> {
    check_partition(joint.dim(), a, b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(0.0);
    }
    let ha = entropy(&joint.marginal(a)?)?;
    let hb = entropy(&joint.marginal(b)?)?;
    let hab = entropy(joint)?;
    clamp_mi(ha + hb - hab)
}

/// One output block `y_j = A_j h_j + ξ_j`, `ξ_j ~ N(0, τ_j I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBlock {
    pub projection: DMatrix<f64>,
    pub noise_var: f64,
}

impl ProjectedBlock {
    pub fn new(projection: DMatrix<f64>, noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(Error::Domain(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        Ok(Self {
            projection,
            noise_var,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// `R / sqrt(τ)` with `RᵀR = AᵀA`.
    pub fn whitener(&self) -> DMatrix<f64> {
        linalg::gram_root(&self.projection) / self.noise_var.sqrt()
    }
}

/// Stacked block-diagonal projection plus per-block isotropic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedOutputSpec {
    pub blocks: Vec<ProjectedBlock>,
}

impl ProjectedOutputSpec {
    pub fn new(blocks: Vec<ProjectedBlock>) -> Self {
        Self { blocks }
    }

    /// `(d_j, k_j)` per block.
    pub fn block_dims(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .map(|b| (b.output_dim(), b.latent_dim()))
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.latent_dim()).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.output_dim()).sum()
    }

    /// Sub-spec over a subset of blocks.
    pub fn select(&self, which: &[usize]) -> Self {
        Self {
            blocks: which.iter().map(|&j| self.blocks[j].clone()).collect(),
        }
    }

    /// Latent coordinate ranges of each block.
    pub fn latent_offsets(&self) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        self.blocks
            .iter()
            .map(|b| {
                let r = off..off + b.latent_dim();
                off += b.latent_dim();
                r
            })
            .collect()
    }
}

/// `log det` of the projected-plus-noise output covariance.
pub fn projected_logdet(latent_cov: &DMatrix<f64>, spec: &ProjectedOutputSpec) -> Result<f64> {
    let k = spec.latent_dim();
    if latent_cov.shape() != (k, k) {
        return Err(Error::contract(format!(
            "latent covariance {:?} does not match spec latent dimension {k}",
            latent_cov.shape()
        )));
    }
    let noise: f64 = spec
        .blocks
        .iter()
        .map(|b| b.output_dim() as f64 * b.noise_var.ln())
        .sum();
    let roots: Vec<DMatrix<f64>> = spec.blocks.iter().map(|b| b.whitener()).collect();
    let root = linalg::block_diag(&roots);
    Ok(noise + whitened_logdet(&root, latent_cov)?)
}

/// Entropy of `N(P μ, P Σ Pᵀ + D)` with `P = blockdiag(A_j)`, `D = blockdiag(τ_j I)`.
pub fn projected_joint_entropy(
    latent_joint: &GaussianBelief,
    spec: &ProjectedOutputSpec,
) -> Result<f64> {
    let logdet = projected_logdet(&latent_joint.cov, spec)?;
    let d = spec.output_dim() as f64;
    Ok(0.5 * (d * (2.0 * PI * E).ln() + logdet))
}

/// Mutual information between two groups of projected output blocks.
///
/// `a_blocks` and `b_blocks` index `spec.blocks`; together they must cover
/// every block exactly once.
pub fn projected_mutual_information(
    latent_joint: &GaussianBelief,
    spec: &ProjectedOutputSpec,
    a_blocks: &[usize],
    b_blocks: &[usize],
) -> Result<f64> {
    check_partition(spec.blocks.len(), a_blocks, b_blocks)?;
    if latent_joint.dim() != spec.latent_dim() {
        return Err(Error::contract(format!(
            "latent joint has dimension {} but spec expects {}",
            latent_joint.dim(),
            spec.latent_dim()
        )));
    }
    if a_blocks.is_empty() || b_blocks.is_empty() {
        return Ok(0.0);
    }
    let offsets = spec.latent_offsets();
    let coords = |blocks: &[usize]| -> Vec<usize> {
        blocks.iter().flat_map(|&j| offsets[j].clone()).collect()
    };
    let la = projected_logdet(
        &linalg::principal_submatrix(&latent_joint.cov, &coords(a_blocks)),
        &spec.select(a_blocks),
    )?;
    let lb = projected_logdet(
        &linalg::principal_submatrix(&latent_joint.cov, &coords(b_blocks)),
        &spec.select(b_blocks),
    )?;
    let lab = projected_logdet(&latent_joint.cov, spec)?;
    clamp_mi(0.5 * (la + lb - lab))
}
