//! Mutual-information acquisition functions.
//!
//! * [`acq_dmfal`]: `I(y_m(x); y_M(x)) / λ_m`, scoring a single pair against
//!   the top fidelity at the same input.
//! * [`acq_single_new`]: `E_{x'}[I(y_m(x); y_M(x'))]`, averaged over a fixed
//!   Monte-Carlo input set.
//! * [`acq_batch`]: the same average for a whole batch of queries.
//! * [`acq_incremental_weighted`]: the per-unit-cost gain of adding one query
//!   to a partial batch, which is what the greedy planner maximises.
//!
//! The free functions evaluate through dense joint beliefs and serve as the
//! reference path. [`IncrementalMi`] computes the same quantities from
//! whitened factors with cached Cholesky factors and is used in the planning
//! loops.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::delta::DeltaContext;
use crate::error::{Error, Result};
use crate::gaussian::clamp_mi;
use crate::linalg::{self, cholesky_jittered};
use crate::model::MfModel;
use crate::optimizer::DomainBox;
use crate::planner::PlanState;
use crate::types::{Fidelity, Query};

/// Fixed inputs `x'_1..x'_A`, uniform over the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McInputSet {
    pub inputs: Vec<Vec<f64>>,
    pub seed: u64,
}

impl McInputSet {
    pub fn draw(domain: &DomainBox, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::contract(
                "Monte-Carlo input set needs at least one input",
            ));
        }
        domain.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inputs: (0..count).map(|_| domain.sample(&mut rng)).collect(),
            seed,
        })
    }

    pub fn from_inputs(inputs: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::contract(
                "Monte-Carlo input set needs at least one input",
            ));
        }
        Ok(Self { inputs, seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `(x'_l, top)` for every input.
    pub fn targets(&self, top: Fidelity) -> Vec<Query> {
        self.inputs
            .iter()
            .map(|x| Query::new(x.clone(), top))
            .collect()
    }
}

/// `I(y_m(x); y_M(x)) / λ_m`.
pub fn acq_dmfal(model: &MfModel, fidelity: Fidelity, x: &[f64], cost: &CostModel) -> Result<f64> {
    let ctx = DeltaContext::new(model)?;
    let q = Query::new(x.to_vec(), fidelity);
    let t = Query::new(x.to_vec(), model.top_fidelity());
    Ok(ctx.output_mi(&[q], &t)? / cost.lambda(fidelity).to_f64())
}

/// `(1/A) Σ_l I(y_m(x); y_M(x'_l))`, not divided by cost.
pub fn acq_single_new(
    model: &MfModel,
    fidelity: Fidelity,
    x: &[f64],
    mc: &McInputSet,
) -> Result<f64> {
    acq_batch(model, &[Query::new(x.to_vec(), fidelity)], mc)
}

/// `(1/A) Σ_l I({y_{m_j}(x_j)}; y_M(x'_l))`.
pub fn acq_batch(model: &MfModel, batch: &[Query], mc: &McInputSet) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("batch must be nonempty"));
    }
    let ctx = DeltaContext::new(model)?;
    let mut total = 0.0;
    for t in mc.targets(model.top_fidelity()) {
        total += ctx.output_mi(batch, &t)?;
    }
    Ok(total / mc.len() as f64)
}

/// `(acq_batch(Y ∪ {q}) − acq_batch(Y)) / λ_m` for the planner state `Y`.
/// Errors if the candidate's fidelity does not fit the remaining budget.
pub fn acq_incremental_weighted(
    model: &MfModel,
    state: &PlanState,
    candidate: &Query,
    mc: &McInputSet,
    cost: &CostModel,
) -> Result<f64> {
    cost.check_affordable(candidate.fidelity, state.accumulated_cost)?;
    let inc = IncrementalMi::from_state(model, &state.queries, mc)?;
    Ok(inc.gain(candidate)? / cost.lambda(candidate.fidelity).to_f64())
}

fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = b.clone();
    if l.nrows() > 0 {
        l.solve_lower_triangular_mut(&mut z);
    }
    z
}

fn chol_logdet(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let f = cholesky_jittered(&linalg::symmetrize(a))?;
    let ld = f.logdet();
    Ok((f.l, ld))
}

/// Cached state for one Monte-Carlo target `t_l`.
#[derive(Debug, Clone)]
struct TargetCache {
    /// Whitened factor `V_t`.
    factor: DMatrix<f64>,
    /// `V_t V_Yᵀ L_Y⁻ᵀ`.
    cross: DMatrix<f64>,
    /// Cholesky of `I + V_t V_tᵀ − cross crossᵀ` (target given the state).
    chol_cond: DMatrix<f64>,
    logdet_prior: f64,
    logdet_cond: f64,
}

/// Incremental evaluator of the batch acquisition for a growing state `Y`.
///
/// With whitened factors `V`, every output log-det in the mutual information
/// reduces to `logdet(I + V_Z V_Zᵀ)` (noise terms cancel). The Cholesky of
/// `I + V_Y V_Yᵀ` and, per target, the Schur complement of the target block
/// are cached; a candidate is scored by two small Schur complements and a
/// commit extends the factors by one block.
#[derive(Debug, Clone)]
pub struct IncrementalMi<'a> {
    ctx: DeltaContext<'a>,
    targets: Vec<TargetCache>,
    state_factor: DMatrix<f64>,
    state_chol: DMatrix<f64>,
    selected: Vec<Query>,
}

/// Quantities shared by scoring and committing a candidate.
struct CandidateTerms {
    factor: DMatrix<f64>,
    /// `L_Y⁻¹ V_Y V_qᵀ`.
    c_state: DMatrix<f64>,
    chol_cond: DMatrix<f64>,
    logdet_cond: f64,
    /// Per target: `V_t V_qᵀ − cross · c_state`.
    w: Vec<DMatrix<f64>>,
}

impl<'a> IncrementalMi<'a> {
    pub fn new(model: &'a MfModel, mc: &McInputSet) -> Result<Self> {
        Self::with_context(DeltaContext::new(model)?, mc)
    }

    pub fn with_context(ctx: DeltaContext<'a>, mc: &McInputSet) -> Result<Self> {
        if mc.is_empty() {
            return Err(Error::contract(
                "Monte-Carlo input set needs at least one input",
            ));
        }
        let p = ctx.model().config().total_weight_dim();
        let targets = mc
            .targets(ctx.model().top_fidelity())
            .iter()
            .map(|t| {
                let factor = ctx.whitened_factor(t)?;
                let k = factor.nrows();
                let m = DMatrix::identity(k, k) + &factor * factor.transpose();
                let (chol, logdet) = chol_logdet(&m)?;
                Ok(TargetCache {
                    cross: DMatrix::zeros(k, 0),
                    chol_cond: chol,
                    logdet_prior: logdet,
                    logdet_cond: logdet,
                    factor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ctx,
            targets,
            state_factor: DMatrix::zeros(0, p),
            state_chol: DMatrix::zeros(0, 0),
            selected: Vec::new(),
        })
    }

    pub fn from_state(model: &'a MfModel, state: &[Query], mc: &McInputSet) -> Result<Self> {
        let mut inc = Self::new(model, mc)?;
        for q in state {
            inc.commit(q)?;
        }
        Ok(inc)
    }

    pub fn context(&self) -> &DeltaContext<'a> {
        &self.ctx
    }

    pub fn selected(&self) -> &[Query] {
        &self.selected
    }

    /// `acq_batch` of the current state (0 when empty).
    pub fn value(&self) -> Result<f64> {
        let mut total = 0.0;
        for t in &self.targets {
            total += clamp_mi(0.5 * (t.logdet_prior - t.logdet_cond))?;
        }
        Ok(total / self.targets.len() as f64)
    }

    fn terms(&self, q: &Query) -> Result<CandidateTerms> {
        let factor = self.ctx.whitened_factor(q)?;
        let k = factor.nrows();
        let cross_q = &self.state_factor * factor.transpose();
        let c_state = solve_lower(&self.state_chol, &cross_q);
        let s =
            DMatrix::identity(k, k) + &factor * factor.transpose() - c_state.transpose() * &c_state;
        let (chol_cond, logdet_cond) = chol_logdet(&s)?;
        let w = self
            .targets
            .iter()
            .map(|t| &t.factor * factor.transpose() - &t.cross * &c_state)
            .collect();
        Ok(CandidateTerms {
            factor,
            c_state,
            chol_cond,
            logdet_cond,
            w,
        })
    }

    /// Unweighted gain `(1/A) Σ_l I(y_q; y_{t_l} | Y)`.
    pub fn gain(&self, q: &Query) -> Result<f64> {
        let terms = self.terms(q)?;
        let s_cond = terms.chol_cond.clone() * terms.chol_cond.transpose();
        let mut total = 0.0;
        for (t, w) in self.targets.iter().zip(&terms.w) {
            let c_t = solve_lower(&t.chol_cond, w);
            let s_both = &s_cond - c_t.transpose() * &c_t;
            let (_, ld) = chol_logdet(&s_both)?;
            total += clamp_mi(0.5 * (terms.logdet_cond - ld))?;
        }
        Ok(total / self.targets.len() as f64)
    }

    /// Appends `q` to the state.
    pub fn commit(&mut self, q: &Query) -> Result<()> {
        let terms = self.terms(q)?;
        let n = self.state_chol.nrows();
        let k = terms.factor.nrows();
        let p = terms.factor.ncols();

        let mut chol = DMatrix::zeros(n + k, n + k);
        chol.view_mut((0, 0), (n, n)).copy_from(&self.state_chol);
        chol.view_mut((n, 0), (k, n))
            .copy_from(&terms.c_state.transpose());
        chol.view_mut((n, n), (k, k)).copy_from(&terms.chol_cond);
        self.state_chol = chol;

        let mut factor = DMatrix::zeros(n + k, p);
        factor.rows_mut(0, n).copy_from(&self.state_factor);
        factor.rows_mut(n, k).copy_from(&terms.factor);
        self.state_factor = factor;

        for (t, w) in self.targets.iter_mut().zip(&terms.w) {
            let b_q = solve_lower(&terms.chol_cond, &w.transpose()).transpose();
            let kt = t.factor.nrows();
            let mut cross = DMatrix::zeros(kt, n + k);
            cross.columns_mut(0, n).copy_from(&t.cross);
            cross.columns_mut(n, k).copy_from(&b_q);
            t.cross = cross;
            let m = DMatrix::identity(kt, kt) + &t.factor * t.factor.transpose()
                - &t.cross * t.cross.transpose();
            let (chol, ld) = chol_logdet(&m)?;
            t.chol_cond = chol;
            t.logdet_cond = ld;
        }
        self.selected.push(q.clone());
        Ok(())
    }
}

/// Fast `I(y_m(x); y_M(x))` through whitened factors.
pub fn dmfal_mi(ctx: &DeltaContext<'_>, fidelity: Fidelity, x: &[f64]) -> Result<f64> {
    let q = Query::new(x.to_vec(), fidelity);
    let vq = ctx.whitened_factor(&q)?;
    let top = ctx.model().top_fidelity();
    let vt = if fidelity == top {
        vq.clone()
    } else {
        ctx.whitened_factor(&Query::new(x.to_vec(), top))?
    };
    let (kq, kt) = (vq.nrows(), vt.nrows());
    let mut v = DMatrix::zeros(kq + kt, vq.ncols());
    v.rows_mut(0, kq).copy_from(&vq);
    v.rows_mut(kq, kt).copy_from(&vt);
    let gram = |a: &DMatrix<f64>| DMatrix::identity(a.nrows(), a.nrows()) + a * a.transpose();
    let (_, la) = chol_logdet(&gram(&vq))?;
    let (_, lb) = chol_logdet(&gram(&vt))?;
    let (_, lab) = chol_logdet(&gram(&v))?;
    clamp_mi(0.5 * (la + lb - lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, CovarianceKind, ModelConfig};

    fn model(seed: u64) -> MfModel {
        MfModel::new(
            ModelConfig {
                num_fidelities: 2,
                input_dim: 2,
                latent_dims: vec![2, 3],
                output_dims: vec![4, 6],
                hidden_width: 4,
                hidden_layers: 1,
                activation: Activation::Tanh,
                covariance: CovarianceKind::Full,
                init_posterior_std: 0.3,
                init_noise_var: 0.05,
            },
            seed,
        )
        .unwrap()
    }

    fn mc() -> McInputSet {
        McInputSet::draw(&DomainBox::unit(2), 5, 3).unwrap()
    }

    #[test]
    fn incremental_matches_reference() {
        let m = model(1);
        let mc = mc();
        let qs = [
            Query::new(vec![0.2, 0.3], Fidelity::level(1)),
            Query::new(vec![0.9, 0.1], Fidelity::level(2)),
            Query::new(vec![0.5, 0.5], Fidelity::level(1)),
        ];
        let mut inc = IncrementalMi::new(&m, &mc).unwrap();
        assert_eq!(inc.value().unwrap(), 0.0);
        for (i, q) in qs.iter().enumerate() {
            let before = if i == 0 {
                0.0
            } else {
                acq_batch(&m, &qs[..i], &mc).unwrap()
            };
            let after = acq_batch(&m, &qs[..=i], &mc).unwrap();
            let gain = inc.gain(q).unwrap();
            assert!(
                (gain - (after - before)).abs() < 1e-8,
                "{gain} vs {}",
                after - before
            );
            inc.commit(q).unwrap();
            assert!((inc.value().unwrap() - after).abs() < 1e-8);
        }
    }

    #[test]
    fn fast_dmfal_matches_reference() {
        let m = model(2);
        let ctx = DeltaContext::new(&m).unwrap();
        let cost = CostModel::from_integers(&[1, 3], 10).unwrap();
        for f in 1..=2 {
            let x = [0.4, 0.7];
            let reference = acq_dmfal(&m, Fidelity::level(f), &x, &cost).unwrap();
            let fast = dmfal_mi(&ctx, Fidelity::level(f), &x).unwrap()
                / cost.lambda(Fidelity::level(f)).to_f64();
            assert!((reference - fast).abs() < 1e-9);
        }
    }

    #[test]
    fn unaffordable_candidate_is_budget_violation() {
        let m = model(3);
        let cost = CostModel::from_integers(&[1, 3], 2).unwrap();
        let state = PlanState::new(2);
        let r = acq_incremental_weighted(
            &m,
            &state,
            &Query::new(vec![0.5, 0.5], Fidelity::level(2)),
            &mc(),
            &cost,
        );
        assert!(matches!(r, Err(Error::BudgetViolation { .. })));
    }
}
