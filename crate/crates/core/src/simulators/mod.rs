//! Multi-fidelity oracles: each fidelity maps a small input vector to a field
//! on a progressively finer mesh at a progressively higher cost.

mod banded;
mod mesh;
mod pde;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use banded::{BandedCholesky, BandedSpd};
pub use mesh::{interpolate, MeshSpec};
pub use pde::{
    bump, solve_heat, solve_poisson, HeatParams, HeatSolver, PoissonSolver, BUMP_WIDTH,
    POISSON_AMPLITUDE, RESIDUAL_TOLERANCE,
};
pub use synthetic::{SyntheticOracle, DEFAULT_DISCREPANCY};

use crate::cost::Cost;
use crate::error::{Error, Result};
use crate::optimizer::DomainBox;
use crate::types::Fidelity;

/// Meshes and costs per fidelity plus the dense evaluation mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityLadder {
    pub meshes: Vec<MeshSpec>,
    pub lambdas: Vec<Cost>,
    pub eval_mesh: MeshSpec,
}

impl FidelityLadder {
    pub fn new(meshes: Vec<MeshSpec>, lambdas: Vec<Cost>, eval_mesh: MeshSpec) -> Result<Self> {
        let l = Self {
            meshes,
            lambdas,
            eval_mesh,
        };
        l.validate()?;
        Ok(l)
    }

    /// Meshes 17/33 with costs 1/3, or 17/33/65 with costs 1/3/10; evaluation on 65.
    pub fn standard(num_fidelities: usize) -> Result<Self> {
        let (ns, ls): (&[usize], &[i64]) = match num_fidelities {
            2 => (&[17, 33], &[1, 3]),
            3 => (&[17, 33, 65], &[1, 3, 10]),
            m => {
                return Err(Error::contract(format!(
                    "standard ladders have 2 or 3 fidelities, not {m}"
                )))
            }
        };
        Self::new(
            ns.iter()
                .map(|&n| MeshSpec::new(n))
                .collect::<Result<_>>()?,
            ls.iter().map(|&l| Cost::integer(l)).collect(),
            MeshSpec::new(65)?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.meshes.is_empty() || self.meshes.len() != self.lambdas.len() {
            return Err(Error::contract("ladder needs one cost per mesh"));
        }
        if self.meshes.windows(2).any(|w| w[0].n() >= w[1].n()) {
            return Err(Error::contract("ladder meshes must be strictly increasing"));
        }
        if self.lambdas.iter().any(|l| !l.is_positive())
            || self.lambdas.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Domain(
                "ladder costs must be positive and nondecreasing".into(),
            ));
        }
        Ok(())
    }

    pub fn num_fidelities(&self) -> usize {
        self.meshes.len()
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.meshes.iter().map(|m| m.len()).collect()
    }

    pub fn top_mesh(&self) -> MeshSpec {
        *self.meshes.last().expect("validated nonempty")
    }
}

/// A deterministic multi-fidelity simulator.
pub trait SimulatorOracle: Send + Sync {
    fn name(&self) -> &'static str;

    fn domain(&self) -> &DomainBox;

    fn ladder(&self) -> &FidelityLadder;

    fn input_dim(&self) -> usize {
        self.domain().dim()
    }

    /// Field at fidelity `m` on that fidelity's mesh. Inputs are assumed valid.
    fn field(&self, x: &[f64], fidelity: Fidelity) -> Result<Vec<f64>>;

    /// Ground-truth top-fidelity field on the evaluation mesh.
    fn reference(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Field and cost of one query.
    fn query(&self, x: &[f64], fidelity: Fidelity) -> Result<(Vec<f64>, Cost)> {
        if !self.domain().contains(x) {
            return Err(Error::contract(format!("input {x:?} outside the domain")));
        }
        let ladder = self.ladder();
        if fidelity.index() >= ladder.num_fidelities() {
            return Err(Error::contract(format!(
                "fidelity {fidelity} out of range 1..={}",
                ladder.num_fidelities()
            )));
        }
        Ok((self.field(x, fidelity)?, ladder.lambdas[fidelity.index()]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Poisson,
    Heat,
    Synthetic,
}

impl std::str::FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(Problem::Poisson),
            "heat" => Ok(Problem::Heat),
            "synthetic" => Ok(Problem::Synthetic),
            other => Err(Error::parse(
                "problem",
                format!("unknown problem {other:?}"),
            )),
        }
    }
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Problem::Poisson => "poisson",
            Problem::Heat => "heat",
            Problem::Synthetic => "synthetic",
        })
    }
}

fn default_num_fidelities() -> usize {
    2
}

/// Which oracle to build; unset fields take the standard ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub problem: Problem,
    #[serde(default = "default_num_fidelities")]
    pub num_fidelities: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meshes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<Cost>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_mesh: Option<usize>,
    /// Synthetic oracle only: strength of the low-fidelity distortion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrepancy: Option<f64>,
}

impl OracleSpec {
    pub fn new(problem: Problem, num_fidelities: usize) -> Self {
        Self {
            problem,
            num_fidelities,
            meshes: None,
            lambdas: None,
            eval_mesh: None,
            discrepancy: None,
        }
    }

    pub fn ladder(&self) -> Result<FidelityLadder> {
        let standard = FidelityLadder::standard(self.num_fidelities).ok();
        let meshes = match (&self.meshes, &standard) {
            (Some(ns), _) => ns
                .iter()
                .map(|&n| MeshSpec::new(n))
                .collect::<Result<_>>()?,
            (None, Some(s)) => s.meshes.clone(),
            (None, None) => {
                return Err(Error::contract("meshes must be given for this ladder size"))
            }
        };
        let lambdas = match (&self.lambdas, &standard) {
            (Some(l), _) => l.clone(),
            (None, Some(s)) => s.lambdas.clone(),
            (None, None) => {
                return Err(Error::contract(
                    "lambdas must be given for this ladder size",
                ))
            }
        };
        let eval = MeshSpec::new(self.eval_mesh.unwrap_or(65))?;
        let ladder = FidelityLadder::new(meshes, lambdas, eval)?;
        if ladder.num_fidelities() != self.num_fidelities {
            return Err(Error::contract("num_fidelities does not match the ladder"));
        }
        Ok(ladder)
    }

    pub fn build(&self) -> Result<Box<dyn SimulatorOracle>> {
        let ladder = self.ladder()?;
        Ok(match self.problem {
            Problem::Synthetic => Box::new(SyntheticOracle::new(
                ladder,
                self.discrepancy.unwrap_or(DEFAULT_DISCREPANCY),
            )?),
            Problem::Poisson => Box::new(PdeOracle::new(PdeKind::Poisson, ladder)?),
            Problem::Heat => Box::new(PdeOracle::new(PdeKind::Heat, ladder)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PdeKind {
    Poisson,
    Heat,
}

#[derive(Debug, Clone)]
enum Factored {
    Poisson(PoissonSolver),
    Heat(HeatSolver),
}

impl Factored {
    fn new(kind: PdeKind, mesh: MeshSpec) -> Result<Self> {
        Ok(match kind {
            PdeKind::Poisson => Factored::Poisson(PoissonSolver::new(mesh)?),
            PdeKind::Heat => Factored::Heat(HeatSolver::new(mesh, HeatParams::default())?),
        })
    }

    fn run(&self, x: &[f64], mesh: MeshSpec) -> Result<Vec<f64>> {
        match self {
            Factored::Poisson(s) => s.solve(&mesh.sample(bump(x, POISSON_AMPLITUDE))),
            Factored::Heat(s) => s.solve(&mesh.sample(bump(x, 1.0))),
        }
    }
}

/// Poisson or heat oracle; the input is the bump centre in `[0.1, 0.9]²`.
#[derive(Debug, Clone)]
pub struct PdeOracle {
    kind: PdeKind,
    ladder: FidelityLadder,
    domain: DomainBox,
    solvers: Vec<Factored>,
    eval_solver: Factored,
}

impl PdeOracle {
    fn new(kind: PdeKind, ladder: FidelityLadder) -> Result<Self> {
        let solvers = ladder
            .meshes
            .iter()
            .map(|&m| Factored::new(kind, m))
            .collect::<Result<_>>()?;
        let eval_solver = Factored::new(kind, ladder.eval_mesh)?;
        Ok(Self {
            kind,
            ladder,
            domain: DomainBox::new(vec![0.1, 0.1], vec![0.9, 0.9])?,
            solvers,
            eval_solver,
        })
    }
}

impl SimulatorOracle for PdeOracle {
    fn name(&self) -> &'static str {
        match self.kind {
            PdeKind::Poisson => "poisson",
            PdeKind::Heat => "heat",
        }
    }

    fn domain(&self) -> &DomainBox {
        &self.domain
    }

    fn ladder(&self) -> &FidelityLadder {
        &self.ladder
    }

    fn field(&self, x: &[f64], fidelity: Fidelity) -> Result<Vec<f64>> {
        let m = fidelity.index();
        self.solvers[m].run(x, self.ladder.meshes[m])
    }

    fn reference(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval_solver.run(x, self.ladder.eval_mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn costs_follow_the_ladder() {
        for problem in [Problem::Poisson, Problem::Heat, Problem::Synthetic] {
            let oracle = OracleSpec::new(problem, 3).build().unwrap();
            for (m, expect) in [1, 3, 10].into_iter().enumerate() {
                let (y, c) = oracle.query(&[0.4, 0.6], Fidelity::from_index(m)).unwrap();
                assert_eq!(c, Cost::integer(expect));
                assert_eq!(y.len(), oracle.ladder().meshes[m].len());
            }
            assert_eq!(oracle.reference(&[0.4, 0.6]).unwrap().len(), 65 * 65);
        }
    }

    #[test]
    fn queries_are_deterministic() {
        let oracle = OracleSpec::new(Problem::Heat, 2).build().unwrap();
        let a = oracle.query(&[0.3, 0.7], Fidelity::level(2)).unwrap();
        let b = oracle.query(&[0.3, 0.7], Fidelity::level(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_domain_rejected() {
        let oracle = OracleSpec::new(Problem::Poisson, 2).build().unwrap();
        assert!(oracle.query(&[0.05, 0.5], Fidelity::level(1)).is_err());
        assert!(oracle.query(&[0.5, 0.5], Fidelity::level(3)).is_err());
    }

    #[test]
    fn spec_parses_problem_names() {
        assert_eq!("Poisson".parse::<Problem>().unwrap(), Problem::Poisson);
        assert!("burgers".parse::<Problem>().is_err());
    }
}
