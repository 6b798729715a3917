//! Closed-form multi-fidelity field family for fast experiments.
//!
//! The top fidelity samples
//!
//! ```text
//! g(x; s) = exp(−|s − c(x)|² / (2 w²)) + 0.25 sin(π s1 (1 + x2)) cos(π s2 x1),   c(x) = 0.25 + 0.5 x
//! ```
//!
//! Lower fidelities widen the bump (a smoothing of the target) and add a
//! low-frequency discrepancy, both scaled by `discrepancy · gap_m` where
//! `gap_m = (M − m) / (M − 1)`.

use std::f64::consts::PI;

use super::mesh::MeshSpec;
use super::{FidelityLadder, SimulatorOracle};
use crate::error::{Error, Result};
use crate::optimizer::DomainBox;
use crate::types::Fidelity;

pub const DEFAULT_DISCREPANCY: f64 = 0.5;

const WIDTH: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    ladder: FidelityLadder,
    domain: DomainBox,
    discrepancy: f64,
}

impl SyntheticOracle {
    pub fn new(ladder: FidelityLadder, discrepancy: f64) -> Result<Self> {
        ladder.validate()?;
        if !discrepancy.is_finite() || discrepancy < 0.0 {
            return Err(Error::Domain(format!(
                "discrepancy must be nonnegative, got {discrepancy}"
            )));
        }
        Ok(Self {
            ladder,
            domain: DomainBox::unit(2),
            discrepancy,
        })
    }

    /// The closed-form top-fidelity target at one point.
    pub fn target(x: &[f64], s1: f64, s2: f64) -> f64 {
        Self::value(x, s1, s2, 0.0)
    }

    fn value(x: &[f64], s1: f64, s2: f64, distortion: f64) -> f64 {
        let c1 = 0.25 + 0.5 * x[0];
        let c2 = 0.25 + 0.5 * x[1];
        let w = WIDTH * (1.0 + distortion);
        let d2 = (s1 - c1).powi(2) + (s2 - c2).powi(2);
        let wave = 0.25 * (PI * s1 * (1.0 + x[1])).sin() * (PI * s2 * x[0]).cos();
        let bias = 0.5 * distortion * (PI * s1).sin() * (PI * s2).sin() * (1.0 + x[0] - x[1]);
        (-d2 / (2.0 * w * w)).exp() + wave + bias
    }

    fn distortion(&self, fidelity: Fidelity) -> f64 {
        let m = self.ladder.num_fidelities();
        if m == 1 {
            return 0.0;
        }
        let gap = (m - 1 - fidelity.index()) as f64 / (m - 1) as f64;
        self.discrepancy * gap
    }

    fn sample(&self, x: &[f64], mesh: MeshSpec, distortion: f64) -> Vec<f64> {
        mesh.sample(|s1, s2| Self::value(x, s1, s2, distortion))
    }
}

impl SimulatorOracle for SyntheticOracle {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn domain(&self) -> &DomainBox {
        &self.domain
    }

    fn ladder(&self) -> &FidelityLadder {
        &self.ladder
    }

    fn field(&self, x: &[f64], fidelity: Fidelity) -> Result<Vec<f64>> {
        let mesh = self.ladder.meshes[fidelity.index()];
        Ok(self.sample(x, mesh, self.distortion(fidelity)))
    }

    fn reference(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.sample(x, self.ladder.eval_mesh, 0.0))
    }
}
