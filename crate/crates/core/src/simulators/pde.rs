//! Five-point finite-difference Poisson and heat solvers on the unit square
//! with homogeneous Dirichlet boundaries.

use serde::{Deserialize, Serialize};

use super::banded::{BandedCholesky, BandedSpd};
use super::mesh::MeshSpec;
use crate::error::{Error, Result};

/// Relative residual accepted from the direct solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Width of the Gaussian source and initial bumps.
pub const BUMP_WIDTH: f64 = 0.1;

/// Source amplitude for the Poisson problem; gives peak solutions of order one.
pub const POISSON_AMPLITUDE: f64 = 100.0;

/// Interior-node system `shift I + scale (−Δ_h)`.
fn stencil_system(mesh: MeshSpec, shift: f64, scale: f64) -> BandedSpd {
    let m = mesh.n() - 2;
    let h2 = mesh.spacing().powi(2);
    let mut a = BandedSpd::zeros(m * m, m);
    for j in 0..m {
        for i in 0..m {
            let r = j * m + i;
            a.add(r, r, shift + 4.0 * scale / h2);
            if i > 0 {
                a.add(r, r - 1, -scale / h2);
            }
            if j > 0 {
                a.add(r, r - m, -scale / h2);
            }
        }
    }
    a
}

fn interior(mesh: MeshSpec, field: &[f64]) -> Vec<f64> {
    let n = mesh.n();
    let mut out = Vec::with_capacity((n - 2) * (n - 2));
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            out.push(field[mesh.index(i, j)]);
        }
    }
    out
}

fn embed(mesh: MeshSpec, inner: &[f64]) -> Vec<f64> {
    let n = mesh.n();
    let mut out = vec![0.0; mesh.len()];
    let mut k = 0;
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            out[mesh.index(i, j)] = inner[k];
            k += 1;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Factorised discrete Laplacian for repeated Poisson solves on one mesh.
#[derive(Debug, Clone)]
pub struct PoissonSolver {
    mesh: MeshSpec,
    system: BandedSpd,
    chol: BandedCholesky,
}

impl PoissonSolver {
    pub fn new(mesh: MeshSpec) -> Result<Self> {
        let system = stencil_system(mesh, 0.0, 1.0);
        let chol = system.factor()?;
        Ok(Self { mesh, system, chol })
    }

    /// Solves `−Δu = f` given nodal source values (boundary entries ignored).
    pub fn solve(&self, source: &[f64]) -> Result<Vec<f64>> {
        if source.len() != self.mesh.len() {
            return Err(Error::contract("source length does not match mesh"));
        }
        let rhs = interior(self.mesh, source);
        let u = self.chol.solve(&rhs);
        let res: Vec<f64> = self
            .system
            .matvec(&u)
            .iter()
            .zip(&rhs)
            .map(|(a, b)| a - b)
            .collect();
        let scale = norm(&rhs);
        if norm(&res) > RESIDUAL_TOLERANCE * scale.max(f64::MIN_POSITIVE) && scale > 0.0 {
            return Err(Error::Numerical(format!(
                "Poisson residual {:e} exceeds tolerance",
                norm(&res) / scale
            )));
        }
        Ok(embed(self.mesh, &u))
    }
}

/// Gaussian bump centred at `c` with the fixed width.
pub fn bump(c: &[f64], amplitude: f64) -> impl Fn(f64, f64) -> f64 + '_ {
    move |s1, s2| {
        let d2 = (s1 - c[0]).powi(2) + (s2 - c[1]).powi(2);
        amplitude * (-d2 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
    }
}

/// `−Δu = f_x`, `f_x` a Gaussian bump centred at `x`.
pub fn solve_poisson(x: &[f64], mesh: MeshSpec) -> Result<Vec<f64>> {
    PoissonSolver::new(mesh)?.solve(&mesh.sample(bump(x, POISSON_AMPLITUDE)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatParams {
    pub alpha: f64,
    pub dt: f64,
    pub t_final: f64,
}

impl Default for HeatParams {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            dt: 1e-2,
            t_final: 1.0,
        }
    }
}

impl HeatParams {
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// Implicit-Euler integrator for `u_t = α Δu`.
#[derive(Debug, Clone)]
pub struct HeatSolver {
    mesh: MeshSpec,
    params: HeatParams,
    chol: Option<BandedCholesky>,
}

impl HeatSolver {
    pub fn new(mesh: MeshSpec, params: HeatParams) -> Result<Self> {
        if !(params.dt > 0.0) || !(params.t_final >= 0.0) || !(params.alpha >= 0.0) {
            return Err(Error::Domain(
                "heat parameters must be nonnegative with dt > 0".into(),
            ));
        }
        let chol = if params.alpha > 0.0 {
            Some(stencil_system(mesh, 1.0, params.dt * params.alpha).factor()?)
        } else {
            None
        };
        Ok(Self { mesh, params, chol })
    }

    /// Field at the final time from a nodal initial condition (boundary forced to 0).
    pub fn solve(&self, initial: &[f64]) -> Result<Vec<f64>> {
        if initial.len() != self.mesh.len() {
            return Err(Error::contract("initial field length does not match mesh"));
        }
        let mut u = interior(self.mesh, initial);
        if let Some(chol) = &self.chol {
            for _ in 0..self.params.steps() {
                u = chol.solve(&u);
            }
        }
        Ok(embed(self.mesh, &u))
    }
}

/// Heat equation from a unit Gaussian bump centred at `x`.
pub fn solve_heat(x: &[f64], mesh: MeshSpec) -> Result<Vec<f64>> {
    HeatSolver::new(mesh, HeatParams::default())?.solve(&mesh.sample(bump(x, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_source_zero_solution() {
        let mesh = MeshSpec::new(9).unwrap();
        let u = PoissonSolver::new(mesh)
            .unwrap()
            .solve(&vec![0.0; mesh.len()])
            .unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centred_source_is_symmetric() {
        let mesh = MeshSpec::new(17).unwrap();
        let u = solve_poisson(&[0.5, 0.5], mesh).unwrap();
        for j in 0..17 {
            for i in 0..17 {
                assert!((u[mesh.index(i, j)] - u[mesh.index(j, i)]).abs() < 1e-12);
            }
        }
        let peak = u.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.3 && peak < 3.0, "peak {peak}");
    }

    #[test]
    fn no_diffusion_keeps_initial_state() {
        let mesh = MeshSpec::new(9).unwrap();
        let solver = HeatSolver::new(
            mesh,
            HeatParams {
                alpha: 0.0,
                ..HeatParams::default()
            },
        )
        .unwrap();
        let u0 = mesh.sample(|s1, s2| (PI * s1).sin() * (PI * s2).sin());
        let u = solver.solve(&u0).unwrap();
        assert!(u.iter().zip(&u0).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn heat_maximum_principle() {
        let mesh = MeshSpec::new(17).unwrap();
        let u0 = mesh.sample(bump(&[0.3, 0.6], 1.0));
        let u = solve_heat(&[0.3, 0.6], mesh).unwrap();
        let m0 = u0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m1 = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(m1 <= m0 + 1e-10);
    }
}
