//! Exact per-fidelity query costs and batch budgets.
//!
//! Costs are rationals so that budget feasibility never depends on
//! floating-point rounding. In config files a cost may be written as an
//! integer, a `"p/q"` string, or a decimal number (converted exactly when it
//! has a short rational form).

use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::types::Fidelity;

/// A nonnegative exact cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Cost(pub Rational64);

impl Cost {
    pub fn zero() -> Self {
        Cost(Rational64::zero())
    }

    pub fn integer(v: i64) -> Self {
        Cost(Rational64::from_integer(v))
    }

    pub fn ratio(num: i64, den: i64) -> Self {
        Cost(Rational64::new(num, den))
    }

    pub fn from_f64(v: f64) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::Domain(format!("cost must be finite, got {v}")));
        }
        // decimals with up to 9 fractional digits are represented exactly
        let scaled = (v * 1e9).round();
        if (scaled / 1e9 - v).abs() <= 1e-12 * v.abs().max(1.0) && scaled.abs() < 9e18 {
            return Ok(Cost(Rational64::new(scaled as i64, 1_000_000_000)));
        }
        Rational64::approximate_float(v)
            .map(Cost)
            .ok_or_else(|| Error::Domain(format!("cannot represent cost {v} as a rational")))
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_positive(self) -> bool {
        self.0 > Rational64::zero()
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost(self.0 + o.0)
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.0 += o.0;
    }
}

impl std::ops::Sub for Cost {
    type Output = Cost;
    fn sub(self, o: Cost) -> Cost {
        Cost(self.0 - o.0)
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::zero(), |a, b| a + b)
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Cost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: i64 = n.trim().parse().map_err(|e| Error::parse("cost", e))?;
            let d: i64 = d.trim().parse().map_err(|e| Error::parse("cost", e))?;
            if d == 0 {
                return Err(Error::parse("cost", "zero denominator"));
            }
            return Ok(Cost::ratio(n, d));
        }
        if let Ok(i) = s.parse::<i64>() {
            return Ok(Cost::integer(i));
        }
        let v: f64 = s.parse().map_err(|e| Error::parse("cost", e))?;
        Cost::from_f64(v)
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_integer() {
            s.serialize_i64(*self.0.numer())
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Float(f64),
            Text(String),
        }
        let c = match Raw::deserialize(d)? {
            Raw::Int(i) => Ok(Cost::integer(i)),
            Raw::Float(f) => Cost::from_f64(f),
            Raw::Text(t) => t.parse(),
        };
        c.map_err(serde::de::Error::custom)
    }
}

/// Per-fidelity costs `λ_1 ≤ … ≤ λ_M` and the per-batch budget `B`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub lambdas: Vec<Cost>,
    pub budget: Cost,
}

impl CostModel {
    pub fn new(lambdas: Vec<Cost>, budget: Cost) -> Result<Self> {
        let c = Self { lambdas, budget };
        c.validate()?;
        Ok(c)
    }

    /// Integer costs and budget.
    pub fn from_integers(lambdas: &[i64], budget: i64) -> Result<Self> {
        Self::new(
            lambdas.iter().map(|&l| Cost::integer(l)).collect(),
            Cost::integer(budget),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::contract("at least one fidelity cost is required"));
        }
        if self.lambdas.iter().any(|l| !l.is_positive()) {
            return Err(Error::Domain("fidelity costs must be positive".into()));
        }
        if self.lambdas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Domain("fidelity costs must be nondecreasing".into()));
        }
        if !self.budget.is_positive() {
            return Err(Error::Domain("budget must be positive".into()));
        }
        Ok(())
    }

    pub fn num_fidelities(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambda(&self, fidelity: Fidelity) -> Cost {
        self.lambdas[fidelity.index()]
    }

    pub fn max_lambda(&self) -> Cost {
        *self.lambdas.last().expect("validated nonempty")
    }

    /// Fidelities with `λ_m ≤ B − spent`, cheapest first.
    pub fn affordable(&self, spent: Cost) -> Vec<Fidelity> {
        let remaining = self.budget - spent;
        (0..self.lambdas.len())
            .filter(|&m| self.lambdas[m] <= remaining)
            .map(Fidelity::from_index)
            .collect()
    }

    /// Same costs with a different budget.
    pub fn with_budget(&self, budget: Cost) -> Result<Self> {
        Self::new(self.lambdas.clone(), budget)
    }

    pub fn check_affordable(&self, fidelity: Fidelity, spent: Cost) -> Result<()> {
        let remaining = self.budget - spent;
        let cost = self.lambda(fidelity);
        if cost > remaining {
            return Err(Error::BudgetViolation {
                cost: cost.to_string(),
                remaining: remaining.to_string(),
            });
        }
        Ok(())
    }
}
