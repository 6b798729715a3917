//! Budget-constrained weighted greedy batch construction.
//!
//! Each step picks the (input, fidelity) pair with the largest marginal
//! acquisition gain per unit cost among the fidelities that still fit the
//! budget. In [`PlanMode::ExceedOnce`] the step instead maximises over every
//! fidelity; if the winner overshoots the budget it is still taken and the
//! plan ends there.
//!
//! [`plan_batch_discrete`] runs the same loop over a finite candidate list and
//! an arbitrary set function, and [`brute_force_opt`] enumerates the optimum
//! for comparison.

use serde::{Deserialize, Serialize};

use crate::acquisition::{IncrementalMi, McInputSet};
use crate::cost::{Cost, CostModel};
use crate::error::{Error, Result};
use crate::model::MfModel;
use crate::optimizer::{self, DomainBox, OptimizerConfig};
use crate::types::{Fidelity, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    #[default]
    Standard,
    ExceedOnce,
}

/// Partial batch: selected queries, their total cost and per-fidelity counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanState {
    pub queries: Vec<Query>,
    pub accumulated_cost: Cost,
    pub fidelity_counts: Vec<usize>,
}

impl PlanState {
    pub fn new(num_fidelities: usize) -> Self {
        Self {
            queries: Vec::new(),
            accumulated_cost: Cost::zero(),
            fidelity_counts: vec![0; num_fidelities],
        }
    }

    pub fn push(&mut self, q: Query, cost: Cost) {
        self.fidelity_counts[q.fidelity.index()] += 1;
        self.accumulated_cost += cost;
        self.queries.push(q);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub x: Vec<f64>,
    pub fidelity: Fidelity,
    pub cost: Cost,
    /// Weighted incremental score of the pick.
    pub score: f64,
    /// Start point index that produced the pick.
    pub restart: usize,
    pub evaluations: usize,
    /// Whether every fidelity was affordable when the pick was made.
    pub all_affordable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
    pub total_cost: Cost,
    /// Nothing was affordable at the first step.
    pub infeasible: bool,
}

impl Plan {
    pub fn queries(&self) -> Vec<Query> {
        self.steps
            .iter()
            .map(|s| Query::new(s.x.clone(), s.fidelity))
            .collect()
    }

    pub fn fidelity_counts(&self, num_fidelities: usize) -> Vec<usize> {
        let mut c = vec![0; num_fidelities];
        for s in &self.steps {
            c[s.fidelity.index()] += 1;
        }
        c
    }
}

/// Upper bound on greedy iterations: `⌊B/λ_1⌋ + 1`.
pub fn iteration_bound(cost: &CostModel) -> usize {
    let ratio = cost.budget.0 / cost.lambdas[0].0;
    ratio.floor().to_integer() as usize + 1
}

/// Candidate fidelities for the next step and whether all of them fit.
fn step_fidelities(cost: &CostModel, spent: Cost, mode: PlanMode) -> (Vec<Fidelity>, bool) {
    let affordable = cost.affordable(spent);
    let all = affordable.len() == cost.num_fidelities();
    match mode {
        PlanMode::Standard => (affordable, all),
        PlanMode::ExceedOnce if spent < cost.budget => (
            (0..cost.num_fidelities())
                .map(Fidelity::from_index)
                .collect(),
            all,
        ),
        PlanMode::ExceedOnce => (Vec::new(), false),
    }
}

/// Distinct optimizer seed per (step, fidelity).
fn step_seed(base: u64, step: usize, fidelity: Fidelity) -> u64 {
    base ^ ((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        ^ ((fidelity.index() as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Maximises `score` over the box for each candidate fidelity and returns the
/// best `(fidelity, result)`. Ties keep the lower fidelity. Fidelities whose
/// optimisation fails are skipped.
pub fn best_over_fidelities<F>(
    fidelities: &[Fidelity],
    domain: &DomainBox,
    opt: &OptimizerConfig,
    step: usize,
    mut score: F,
) -> Option<(Fidelity, optimizer::OptimizeResult)>
where
    F: FnMut(Fidelity, &[f64]) -> f64,
{
    let mut best: Option<(Fidelity, optimizer::OptimizeResult)> = None;
    for &f in fidelities {
        let cfg = OptimizerConfig {
            seed: step_seed(opt.seed, step, f),
            ..opt.clone()
        };
        let Ok(r) = optimizer::maximize(|x| score(f, x), domain, &cfg) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, b)| r.value > b.value) {
            best = Some((f, r));
        }
    }
    best
}

/// Greedy batch for a trained model.
pub fn plan_batch(
    model: &MfModel,
    domain: &DomainBox,
    cost: &CostModel,
    opt: &OptimizerConfig,
    mc: &McInputSet,
    mode: PlanMode,
) -> Result<Plan> {
    cost.validate()?;
    if cost.num_fidelities() != model.num_fidelities() {
        return Err(Error::contract(format!(
            "cost model has {} fidelities, model has {}",
            cost.num_fidelities(),
            model.num_fidelities()
        )));
    }
    let mut inc = IncrementalMi::new(model, mc)?;
    let mut state = PlanState::new(cost.num_fidelities());
    let mut steps = Vec::new();
    let mut infeasible = false;
    for step in 0..iteration_bound(cost) {
        let (fidelities, all_affordable) = step_fidelities(cost, state.accumulated_cost, mode);
        if fidelities.is_empty() {
            infeasible = step == 0;
            break;
        }
        let lambdas: Vec<f64> = cost.lambdas.iter().map(|l| l.to_f64()).collect();
        let best = best_over_fidelities(&fidelities, domain, opt, step, |f, x| {
            inc.gain(&Query::new(x.to_vec(), f))
                .map(|g| g / lambdas[f.index()])
                .unwrap_or(f64::NAN)
        });
        let Some((fidelity, r)) = best else {
            infeasible = step == 0;
            break;
        };
        let q = Query::new(r.x.clone(), fidelity);
        let c = cost.lambda(fidelity);
        inc.commit(&q)?;
        state.push(q, c);
        steps.push(PlanStep {
            x: r.x,
            fidelity,
            cost: c,
            score: r.value,
            restart: r.best_restart,
            evaluations: r.evaluations,
            all_affordable,
        });
        if state.accumulated_cost > cost.budget {
            break;
        }
    }
    Ok(Plan {
        steps,
        total_cost: state.accumulated_cost,
        infeasible,
    })
}

/// A set function over candidate indices.
pub trait SetFunction {
    fn value(&self, set: &[usize]) -> f64;
}

impl<F: Fn(&[usize]) -> f64> SetFunction for F {
    fn value(&self, set: &[usize]) -> f64 {
        self(set)
    }
}

/// One element of a finite ground set: a grid point at a fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteCandidate {
    pub point: usize,
    pub fidelity: Fidelity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteStep {
    pub candidate: usize,
    pub cost: Cost,
    pub score: f64,
    /// Cost and objective value after this pick.
    pub prefix_cost: Cost,
    pub prefix_value: f64,
    pub all_affordable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePlan {
    pub picks: Vec<usize>,
    pub steps: Vec<DiscreteStep>,
    pub total_cost: Cost,
    pub value: f64,
    pub infeasible: bool,
}

/// Weighted greedy over a finite ground set; each candidate is used at most once.
/// Ties in score go to the lower fidelity, then the lower grid point.
pub fn plan_batch_discrete(
    f: &dyn SetFunction,
    candidates: &[DiscreteCandidate],
    cost: &CostModel,
    mode: PlanMode,
) -> Result<DiscretePlan> {
    cost.validate()?;
    if candidates
        .iter()
        .any(|c| c.fidelity.index() >= cost.num_fidelities())
    {
        return Err(Error::contract("candidate fidelity outside the cost model"));
    }
    let mut picks: Vec<usize> = Vec::new();
    let mut steps = Vec::new();
    let mut spent = Cost::zero();
    let mut current = f.value(&[]);
    let mut infeasible = false;
    for step in 0..iteration_bound(cost) {
        let (fidelities, all_affordable) = step_fidelities(cost, spent, mode);
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, c) in candidates.iter().enumerate() {
            if picks.contains(&i) || !fidelities.contains(&c.fidelity) {
                continue;
            }
            let mut trial = picks.clone();
            trial.push(i);
            let v = f.value(&trial);
            let score = (v - current) / cost.lambda(c.fidelity).to_f64();
            let better = match best {
                None => true,
                Some((j, s, _)) => {
                    let cj = candidates[j];
                    score > s || (score == s && (c.fidelity, c.point) < (cj.fidelity, cj.point))
                }
            };
            if better {
                best = Some((i, score, v));
            }
        }
        let Some((i, score, v)) = best else {
            infeasible = step == 0 && fidelities.is_empty();
            break;
        };
        let c = cost.lambda(candidates[i].fidelity);
        picks.push(i);
        spent += c;
        current = v;
        steps.push(DiscreteStep {
            candidate: i,
            cost: c,
            score,
            prefix_cost: spent,
            prefix_value: v,
            all_affordable,
        });
        if spent > cost.budget {
            break;
        }
    }
    Ok(DiscretePlan {
        picks,
        steps,
        total_cost: spent,
        value: current,
        infeasible,
    })
}

/// Largest enumeration accepted by [`brute_force_opt`].
pub const MAX_ENUMERATION: usize = 1 << 20;

/// Exact maximiser of `f` over subsets with total cost `≤ budget`.
pub fn brute_force_opt(
    f: &dyn SetFunction,
    candidates: &[DiscreteCandidate],
    cost: &CostModel,
    budget: Cost,
) -> Result<(Vec<usize>, f64)> {
    let n = candidates.len();
    if n >= 64 || (1usize << n) > MAX_ENUMERATION {
        return Err(Error::SearchTooLarge(format!(
            "{n} candidates give 2^{n} subsets (limit {MAX_ENUMERATION})"
        )));
    }
    let costs: Vec<Cost> = candidates.iter().map(|c| cost.lambda(c.fidelity)).collect();
    let mut best = (Vec::new(), f.value(&[]));
    let mut set = Vec::with_capacity(n);
    for mask in 1usize..(1 << n) {
        set.clear();
        let mut total = Cost::zero();
        for (i, &c) in costs.iter().enumerate() {
            if mask >> i & 1 == 1 {
                set.push(i);
                total += c;
            }
        }
        if total > budget {
            continue;
        }
        let v = f.value(&set);
        if v > best.1 {
            best = (set.clone(), v);
        }
    }
    Ok(best)
}
