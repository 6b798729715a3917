use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A fidelity level. Stored 0-based; displayed and serialised 1-based,
/// so fidelity 1 is the cheapest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fidelity(usize);

impl Fidelity {
    /// From a 0-based index.
    pub const fn from_index(index: usize) -> Self {
        Self(index)
    }

    /// From a 1-based level (`1..=M`). Panics on 0.
    pub fn level(level: usize) -> Self {
        assert!(level >= 1, "fidelity levels start at 1");
        Self(level - 1)
    }

    pub const fn index(self) -> usize {
        self.0
    }

    pub const fn as_level(self) -> usize {
        self.0 + 1
    }
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_level())
    }
}

impl Serialize for Fidelity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.as_level() as u64)
    }
}

impl<'de> Deserialize<'de> for Fidelity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let level = u64::deserialize(d)?;
        if level == 0 {
            return Err(serde::de::Error::custom("fidelity levels start at 1"));
        }
        Ok(Fidelity::level(level as usize))
    }
}

/// An (input, fidelity) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub x: Vec<f64>,
    pub fidelity: Fidelity,
}

impl Query {
    pub fn new(x: Vec<f64>, fidelity: Fidelity) -> Self {
        Self { x, fidelity }
    }
}
