//! Multi-start projected L-BFGS for maximising a scalar function over a box.
//!
//! Gradients are central finite differences (one-sided against a bound).
//! Trial points of the backtracking line search are clipped to the box, and
//! coordinates pinned at a bound by the gradient are frozen for the step.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `lower ≤ x ≤ upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::contract(
                "box bounds must be nonempty and of equal length",
            ));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite())
        {
            return Err(Error::Domain(
                "box bounds must be finite with lower < upper".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l + (u - l) * rng.random::<f64>())
            .collect()
    }
}

fn default_restarts() -> usize {
    10
}
fn default_max_iters() -> usize {
    50
}
fn default_grad_step() -> f64 {
    1e-5
}
fn default_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Relative finite-difference step.
    #[serde(default = "default_grad_step")]
    pub grad_step: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: default_restarts(),
            max_iters: default_max_iters(),
            grad_step: default_grad_step(),
            tol: default_tol(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iters == 0 || !(self.grad_step > 0.0) || !(self.tol > 0.0)
        {
            return Err(Error::contract(
                "restarts, max_iters, grad_step and tol must be positive",
            ));
        }
        Ok(())
    }

    /// Start points: the box center, then uniform draws from a seeded stream.
    /// Fewer restarts always give a prefix of more restarts.
    pub fn start_points(&self, domain: &DomainBox) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = vec![domain.center()];
        for _ in 1..self.restarts {
            out.push(domain.sample(&mut rng));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    /// Index of the start point that produced the optimum.
    pub best_restart: usize,
}

const MEMORY: usize = 7;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;

struct Counter<F> {
    f: F,
    calls: usize,
    non_finite: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counter<F> {
    /// Evaluates `-f` so the inner routine minimises. Non-finite values become `+inf`.
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.calls += 1;
        let v = (self.f)(x);
        if v.is_finite() {
            -v
        } else {
            self.non_finite += 1;
            f64::INFINITY
        }
    }
}

fn fd_gradient<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counter<F>,
    domain: &DomainBox,
    x: &[f64],
    fx: f64,
    rel_step: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        let up = x[i] + h <= domain.upper[i];
        let down = x[i] - h >= domain.lower[i];
        g[i] = if up && down {
            probe[i] = x[i] + h;
            let fp = obj.eval(&probe);
            probe[i] = x[i] - h;
            let fm = obj.eval(&probe);
            (fp - fm) / (2.0 * h)
        } else if up {
            probe[i] = x[i] + h;
            (obj.eval(&probe) - fx) / h
        } else {
            probe[i] = x[i] - h;
            (fx - obj.eval(&probe)) / h
        };
        if !g[i].is_finite() {
            g[i] = 0.0;
        }
        probe[i] = x[i];
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Local projected L-BFGS minimisation of the counter's objective from `x0`.
fn local_search<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counter<F>,
    domain: &DomainBox,
    cfg: &OptimizerConfig,
    x0: &[f64],
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut x = x0.to_vec();
    domain.project(&mut x);
    let mut fx = obj.eval(&x);
    if !fx.is_finite() {
        return (x, fx);
    }
    let mut g = fd_gradient(obj, domain, &x, fx, cfg.grad_step);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    for _ in 0..cfg.max_iters {
        // freeze coordinates pinned at a bound by the gradient
        let free: Vec<bool> = (0..n)
            .map(|i| {
                !((x[i] <= domain.lower[i] && g[i] > 0.0)
                    || (x[i] >= domain.upper[i] && g[i] < 0.0))
            })
            .collect();
        let pg_norm = (0..n)
            .filter(|&i| free[i])
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg_norm < cfg.tol {
            break;
        }

        // two-loop recursion on the free subspace
        let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for v in &mut q {
                *v *= gamma;
            }
        } else {
            // first step: scale so the initial move is at most a tenth of the box
            let width = (0..n)
                .map(|i| domain.upper[i] - domain.lower[i])
                .fold(f64::INFINITY, f64::min);
            let scale = 0.1 * width / pg_norm;
            for v in &mut q {
                *v *= scale;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += s[i] * (a - b);
            }
        }
        let mut d: Vec<f64> = (0..n).map(|i| if free[i] { -q[i] } else { 0.0 }).collect();
        if dot(&d, &g) >= 0.0 {
            history.clear();
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut xt: Vec<f64> = (0..n).map(|i| x[i] + t * d[i]).collect();
            domain.project(&mut xt);
            let step: Vec<f64> = (0..n).map(|i| xt[i] - x[i]).collect();
            let decrease = dot(&g, &step);
            let ft = obj.eval(&xt);
            if ft.is_finite() && ft <= fx + ARMIJO * decrease {
                accepted = Some((xt, ft, step));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew, s)) = accepted else {
            break;
        };
        let gn = fd_gradient(obj, domain, &xn, fnew, cfg.grad_step);
        let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            history.push_back((s.clone(), y, 1.0 / sy));
            if history.len() > MEMORY {
                history.pop_front();
            }
        }
        let df = fx - fnew;
        let dx = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        x = xn;
        fx = fnew;
        g = gn;
        if df <= cfg.tol * (1.0 + fx.abs()) && dx <= cfg.tol.sqrt() {
            break;
        }
        if dx <= 1e-12 {
            break;
        }
    }
    (x, fx)
}

/// Maximises `objective` over `domain`. The returned point lies in the box and
/// its value is at least the best start-point value.
pub fn maximize<F: FnMut(&[f64]) -> f64>(
    objective: F,
    domain: &DomainBox,
    cfg: &OptimizerConfig,
) -> Result<OptimizeResult> {
    domain.validate()?;
    cfg.validate()?;
    let mut obj = Counter {
        f: objective,
        calls: 0,
        non_finite: 0,
    };
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    for (i, start) in cfg.start_points(domain).iter().enumerate() {
        let (x, fx) = local_search(&mut obj, domain, cfg, start);
        if !fx.is_finite() {
            continue;
        }
        // strict improvement keeps the earliest restart on ties
        if best.as_ref().is_none_or(|(_, fb, _)| fx < *fb) {
            best = Some((x, fx, i));
        }
    }
    if 2 * obj.non_finite > obj.calls {
        return Err(Error::Optimizer(format!(
            "objective was non-finite at {} of {} evaluations",
            obj.non_finite, obj.calls
        )));
    }
    let (x, fx, best_restart) =
        best.ok_or_else(|| Error::Optimizer("objective was non-finite at every start".into()))?;
    Ok(OptimizeResult {
        x,
        value: -fx,
        evaluations: obj.calls,
        best_restart,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_quadratic() {
        let c = [0.3, 0.8];
        let r = maximize(
            |x| -((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)),
            &DomainBox::unit(2),
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert!(
            (r.x[0] - c[0]).abs() < 1e-4 && (r.x[1] - c[1]).abs() < 1e-4,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn exterior_quadratic_is_clipped() {
        let c = [1.7, -0.4, 0.5];
        let r = maximize(
            |x| -x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            &DomainBox::unit(3),
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert_eq!(r.x[0], 1.0);
        assert_eq!(r.x[1], 0.0);
        assert!((r.x[2] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn mostly_non_finite_is_error() {
        let r = maximize(
            |_| f64::NAN,
            &DomainBox::unit(2),
            &OptimizerConfig::default(),
        );
        assert!(matches!(r, Err(Error::Optimizer(_))));
    }

    #[test]
    fn bad_box_rejected() {
        assert!(DomainBox::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
    }
}
