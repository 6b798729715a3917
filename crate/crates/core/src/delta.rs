//! First-order (delta-method) Gaussian beliefs over latent outputs.
//!
//! Linearising `h_m(x)` around the posterior mean of the stacked last-layer
//! weights gives `h ≈ h(μ) + J (w − μ)`, so any set of queries has a joint
//! Gaussian latent belief with covariance `J Σ_W Jᵀ`, where
//! `Σ_W = blockdiag(L_1 L_1ᵀ, …, L_M L_Mᵀ)`. Queries share the weight
//! uncertainty and are therefore correlated.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianBelief, ProjectedBlock, ProjectedOutputSpec};
use crate::linalg;
use crate::model::MfModel;
use crate::types::{Fidelity, Query};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum JacobianMethod {
    /// Reverse sweeps over the differentiation tape.
    #[default]
    Reverse,
    /// Central differences with step `rel_step · (1 + |μ_i|)`.
    FiniteDifference { rel_step: f64 },
}

/// Jacobian of `h_m(x)` with respect to the stacked `vec W_1..W_M` at the
/// posterior mean (`k_m x P`).
pub fn latent_jacobian(model: &MfModel, x: &[f64], fidelity: Fidelity) -> Result<DMatrix<f64>> {
    model.latent_jacobian_tape(x, fidelity)
}

pub fn latent_jacobian_fd(
    model: &MfModel,
    x: &[f64],
    fidelity: Fidelity,
    rel_step: f64,
) -> Result<DMatrix<f64>> {
    let m = fidelity.index();
    if m >= model.num_fidelities() {
        return Err(Error::contract(format!("fidelity {fidelity} out of range")));
    }
    let cfg = model.config();
    let base = model.mean_weights();
    let k = cfg.latent_dims[m];
    let mut jac = DMatrix::zeros(k, cfg.total_weight_dim());
    let mut col = 0;
    for j in 0..cfg.num_fidelities {
        for i in 0..base[j].len() {
            if j <= m {
                let mu = base[j].as_slice()[i];
                let h = rel_step * (1.0 + mu.abs());
                let mut plus = base.clone();
                plus[j].as_mut_slice()[i] = mu + h;
                let mut minus = base.clone();
                minus[j].as_mut_slice()[i] = mu - h;
                let hp = &model.forward_latents(&plus, x)?[m];
                let hm = &model.forward_latents(&minus, x)?[m];
                jac.set_column(col + i, &((hp - hm) / (2.0 * h)));
            }
        }
        col += base[j].len();
    }
    Ok(jac)
}

pub fn latent_jacobian_with(
    model: &MfModel,
    x: &[f64],
    fidelity: Fidelity,
    method: JacobianMethod,
) -> Result<DMatrix<f64>> {
    match method {
        JacobianMethod::Reverse => latent_jacobian(model, x, fidelity),
        JacobianMethod::FiniteDifference { rel_step } => {
            latent_jacobian_fd(model, x, fidelity, rel_step)
        }
    }
}

/// Joint Gaussian over stacked latents `[h_{m_1}(x_1); h_{m_2}(x_2); …]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentJointBelief {
    pub belief: GaussianBelief,
    /// Coordinate range of each query's block.
    pub blocks: Vec<Range<usize>>,
}

impl LatentJointBelief {
    pub fn block_marginal(&self, j: usize) -> Result<GaussianBelief> {
        let idx: Vec<usize> = self.blocks[j].clone().collect();
        self.belief.marginal(&idx)
    }
}

/// Per-model quantities reused across many delta-method evaluations.
#[derive(Debug, Clone)]
pub struct DeltaContext<'a> {
    model: &'a MfModel,
    method: JacobianMethod,
    /// `L_j` per fidelity.
    chols: Vec<DMatrix<f64>>,
    /// `R_m / sqrt(τ_m)` per fidelity.
    whiteners: Vec<DMatrix<f64>>,
    mean_weights: Vec<DMatrix<f64>>,
}

impl<'a> DeltaContext<'a> {
    pub fn new(model: &'a MfModel) -> Result<Self> {
        Self::with_method(model, JacobianMethod::Reverse)
    }

    pub fn with_method(model: &'a MfModel, method: JacobianMethod) -> Result<Self> {
        let m = model.num_fidelities();
        let whiteners = (0..m)
            .map(|j| Ok(ProjectedBlock::new(model.projection(j), model.noise_var(j))?.whitener()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            method,
            chols: (0..m).map(|j| model.posterior_chol(j)).collect(),
            whiteners,
            mean_weights: model.mean_weights(),
        })
    }

    pub fn model(&self) -> &MfModel {
        self.model
    }

    fn check(&self, q: &Query) -> Result<()> {
        if q.fidelity.index() >= self.model.num_fidelities() {
            return Err(Error::contract(format!(
                "fidelity {} out of range 1..={}",
                q.fidelity,
                self.model.num_fidelities()
            )));
        }
        Ok(())
    }

    pub fn jacobian(&self, q: &Query) -> Result<DMatrix<f64>> {
        self.check(q)?;
        latent_jacobian_with(self.model, &q.x, q.fidelity, self.method)
    }

    /// `J L_W`: the latent covariance of `q` is `G Gᵀ`.
    pub fn weight_factor(&self, q: &Query) -> Result<DMatrix<f64>> {
        let jac = self.jacobian(q)?;
        Ok(self.times_chol(&jac))
    }

    fn times_chol(&self, jac: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(jac.nrows(), jac.ncols());
        let mut col = 0;
        for l in &self.chols {
            let p = l.nrows();
            let block = jac.columns(col, p) * l;
            out.columns_mut(col, p).copy_from(&block);
            col += p;
        }
        out
    }

    /// Whitened output factor `V = (R_m / sqrt τ_m) J L_W`. For any query set
    /// `Z`, the output covariance log-det equals `Σ d ln τ + logdet(I + V_Z V_Zᵀ)`.
    pub fn whitened_factor(&self, q: &Query) -> Result<DMatrix<f64>> {
        let g = self.weight_factor(q)?;
        Ok(&self.whiteners[q.fidelity.index()] * g)
    }

    pub fn latent_mean(&self, q: &Query) -> Result<DVector<f64>> {
        self.check(q)?;
        let h = self.model.forward_latents(&self.mean_weights, &q.x)?;
        Ok(h[q.fidelity.index()].clone())
    }

    pub fn joint_latent_belief(&self, queries: &[Query]) -> Result<LatentJointBelief> {
        if queries.is_empty() {
            return Err(Error::contract("query set must be nonempty"));
        }
        let mut factors = Vec::with_capacity(queries.len());
        let mut means = Vec::with_capacity(queries.len());
        let mut blocks = Vec::with_capacity(queries.len());
        let mut off = 0;
        for q in queries {
            let g = self.weight_factor(q)?;
            blocks.push(off..off + g.nrows());
            off += g.nrows();
            means.push(self.latent_mean(q)?);
            factors.push(g);
        }
        let mut mean = DVector::zeros(off);
        let mut cov = DMatrix::zeros(off, off);
        // blockwise so each diagonal block is bit-identical to its single-query belief
        for (i, (fi, ri)) in factors.iter().zip(&blocks).enumerate() {
            mean.rows_mut(ri.start, ri.len()).copy_from(&means[i]);
            let diag = linalg::symmetrize(&(fi * fi.transpose()));
            cov.view_mut((ri.start, ri.start), (ri.len(), ri.len()))
                .copy_from(&diag);
            for (fj, rj) in factors.iter().zip(&blocks).skip(i + 1) {
                let cross = fi * fj.transpose();
                cov.view_mut((ri.start, rj.start), (ri.len(), rj.len()))
                    .copy_from(&cross);
                cov.view_mut((rj.start, ri.start), (rj.len(), ri.len()))
                    .copy_from(&cross.transpose());
            }
        }
        Ok(LatentJointBelief {
            belief: GaussianBelief::new(mean, cov)?,
            blocks,
        })
    }

    pub fn output_spec(&self, queries: &[Query]) -> Result<ProjectedOutputSpec> {
        let blocks = queries
            .iter()
            .map(|q| {
                self.check(q)?;
                let m = q.fidelity.index();
                ProjectedBlock::new(self.model.projection(m), self.model.noise_var(m))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProjectedOutputSpec::new(blocks))
    }

    /// `I({y_{m_j}(x_j)}; y_{m'}(x'))` under the joint delta-method belief.
    /// The target's observation noise is independent of every batch member's,
    /// even when it coincides with one of them.
    pub fn output_mi(&self, batch: &[Query], target: &Query) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("batch must be nonempty"));
        }
        let mut all = batch.to_vec();
        all.push(target.clone());
        let joint = self.joint_latent_belief(&all)?;
        let spec = self.output_spec(&all)?;
        let a: Vec<usize> = (0..batch.len()).collect();
        gaussian::projected_mutual_information(&joint.belief, &spec, &a, &[batch.len()])
    }
}

pub fn joint_latent_belief(model: &MfModel, queries: &[Query]) -> Result<LatentJointBelief> {
    DeltaContext::new(model)?.joint_latent_belief(queries)
}

/// Posterior-mean output and the delta-method latent belief at one query.
pub fn predict(
    model: &MfModel,
    x: &[f64],
    fidelity: Fidelity,
) -> Result<(DVector<f64>, GaussianBelief)> {
    let ctx = DeltaContext::new(model)?;
    let q = Query::new(x.to_vec(), fidelity);
    let joint = ctx.joint_latent_belief(std::slice::from_ref(&q))?;
    let mean = model.projection(fidelity.index()) * &joint.belief.mean;
    Ok((mean, joint.belief))
}

pub fn output_mi(model: &MfModel, batch: &[Query], target: &Query) -> Result<f64> {
    DeltaContext::new(model)?.output_mi(batch, target)
}
