//! Training examples and their JSON-lines file format.
//!
//! One example per line: `{"x": [...], "fidelity": m, "y": [...], "cost": λ}`
//! with `m` 1-based.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Fidelity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub fidelity: Fidelity,
    pub y: Vec<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn push(&mut self, example: Example) {
        self.examples.push(example);
    }

    pub fn extend(&mut self, examples: impl IntoIterator<Item = Example>) {
        self.examples.extend(examples);
    }

    /// Number of examples per fidelity (length `num_fidelities`).
    pub fn counts(&self, num_fidelities: usize) -> Vec<usize> {
        let mut c = vec![0; num_fidelities];
        for e in &self.examples {
            if e.fidelity.index() < num_fidelities {
                c[e.fidelity.index()] += 1;
            }
        }
        c
    }

    /// Checks output lengths and fidelity range against a model shape.
    pub fn validate(&self, input_dim: usize, output_dims: &[usize]) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            let m = e.fidelity.index();
            if m >= output_dims.len() {
                return Err(Error::contract(format!(
                    "example {i}: fidelity {} out of range 1..={}",
                    e.fidelity,
                    output_dims.len()
                )));
            }
            if e.x.len() != input_dim {
                return Err(Error::contract(format!(
                    "example {i}: input length {} != {input_dim}",
                    e.x.len()
                )));
            }
            if e.y.len() != output_dims[m] {
                return Err(Error::contract(format!(
                    "example {i}: output length {} != d_{} = {}",
                    e.y.len(),
                    e.fidelity,
                    output_dims[m]
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.examples {
            let line = serde_json::to_string(e).map_err(|e| Error::parse("dataset", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Example = serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e))?;
            examples.push(e);
        }
        Ok(Self { examples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_line_format() {
        let e = Example {
            x: vec![0.25, 0.5],
            fidelity: Fidelity::level(2),
            y: vec![1.0, -2.5, 3.0],
            cost: 3.0,
        };
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(
            line,
            r#"{"x":[0.25,0.5],"fidelity":2,"y":[1.0,-2.5,3.0],"cost":3.0}"#
        );
        let back: Example = serde_json::from_str(&line).unwrap();
        assert_eq!(back, e);
        assert!(
            serde_json::from_str::<Example>(r#"{"x":[],"fidelity":0,"y":[],"cost":1}"#).is_err()
        );
    }

    #[test]
    fn file_roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut d = Dataset::new();
        d.push(Example {
            x: vec![0.1, 0.2],
            fidelity: Fidelity::level(1),
            y: vec![0.1; 4],
            cost: 1.0,
        });
        d.push(Example {
            x: vec![0.3, 0.9],
            fidelity: Fidelity::level(2),
            y: vec![0.7; 9],
            cost: 3.0,
        });
        d.write_jsonl(&path).unwrap();
        let back = Dataset::read_jsonl(&path).unwrap();
        assert_eq!(back, d);
        assert!(back.validate(2, &[4, 9]).is_ok());
        assert!(back.validate(2, &[4, 8]).is_err());
        assert_eq!(back.counts(2), vec![1, 1]);
    }
}
