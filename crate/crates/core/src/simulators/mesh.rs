use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform `n x n` node grid on the unit square, boundary nodes included.
/// Node `(i, j)` sits at `(i h, j h)` and is stored at index `j n + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeshSpec {
    n: usize,
}

impl MeshSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::contract(format!(
                "mesh needs at least 3 points per side, got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn n(self) -> usize {
        self.n
    }

    pub fn spacing(self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    /// Field length `n²`.
    pub fn len(self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn index(self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    pub fn coord(self, i: usize) -> f64 {
        i as f64 / (self.n - 1) as f64
    }

    /// Samples `g(s1, s2)` at every node.
    pub fn sample(self, mut g: impl FnMut(f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.n {
            for i in 0..self.n {
                out.push(g(self.coord(i), self.coord(j)));
            }
        }
        out
    }

    pub fn is_boundary(self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n - 1 || j == self.n - 1
    }
}

/// Cell index and offset in `[0, 1)` of target node `k` (of `to - 1` cells)
/// on a source grid with `from - 1` cells, in exact integer arithmetic.
fn locate(k: usize, from: usize, to: usize) -> (usize, f64) {
    let num = k * (from - 1);
    let den = to - 1;
    let mut cell = num / den;
    let mut rem = num % den;
    if cell == from - 1 {
        cell -= 1;
        rem = den;
    }
    (cell, rem as f64 / den as f64)
}

/// Bilinear interpolation of a nodal field between meshes.
pub fn interpolate(field: &[f64], from: MeshSpec, to: MeshSpec) -> Result<Vec<f64>> {
    if field.len() != from.len() {
        return Err(Error::contract(format!(
            "field length {} does not match {}x{} mesh",
            field.len(),
            from.n,
            from.n
        )));
    }
    if from == to {
        return Ok(field.to_vec());
    }
    let xs: Vec<(usize, f64)> = (0..to.n).map(|k| locate(k, from.n, to.n)).collect();
    let mut out = Vec::with_capacity(to.len());
    for &(cj, tj) in &xs {
        for &(ci, ti) in &xs {
            let v00 = field[from.index(ci, cj)];
            let v10 = field[from.index(ci + 1, cj)];
            let v01 = field[from.index(ci, cj + 1)];
            let v11 = field[from.index(ci + 1, cj + 1)];
            let v = if ti == 0.0 && tj == 0.0 {
                v00
            } else {
                (1.0 - ti) * (1.0 - tj) * v00
                    + ti * (1.0 - tj) * v10
                    + (1.0 - ti) * tj * v01
                    + ti * tj * v11
            };
            out.push(v);
        }
    }
    Ok(out)
}
