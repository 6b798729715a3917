//! A minimal matrix-valued reverse-mode differentiation tape.
//!
//! Nodes hold dense matrices; scalars are `1 x 1`. Operations are recorded in
//! evaluation order, so a single reverse sweep over `nodes` visits every node
//! after all of its consumers. `backward` can be called repeatedly with
//! different seeds (the delta-method Jacobian uses one sweep per latent
//! coordinate).

use nalgebra::DMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul(Var, Var),
    /// `a bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a + 1 bᵀ`: adds the row vector `b` to every row of `a`.
    AddRow(Var, Var),
    Tanh(Var),
    HCat(Var, Var),
    /// Row slice starting at the stored offset.
    Rows(Var, usize),
    Scale(Var, f64),
    /// `a * s` with `s` a `1 x 1` node.
    ScaleBy(Var, Var),
    Sum(Var),
    SumSq(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    /// Lower-triangular matrix from a diagonal column and a packed strictly
    /// lower column (column-major over the triangle).
    LowerTri {
        diag: Var,
        off: Var,
    },
    /// Diagonal matrix from a column vector.
    Diag(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`, zero-filled when absent.
    pub fn get_or_zero(&self, v: Var, shape: (usize, usize)) -> DMatrix<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

/// Inverse of [`softplus_scalar`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// Leaf node (parameter or constant; every leaf receives a gradient).
    pub fn input(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b).transpose();
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        debug_assert_eq!(r.ncols(), v.ncols());
        for mut vr in v.row_iter_mut() {
            vr += r;
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn hcat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(va.nrows(), vb.nrows());
        let mut v = DMatrix::zeros(va.nrows(), va.ncols() + vb.ncols());
        v.columns_mut(0, va.ncols()).copy_from(va);
        v.columns_mut(va.ncols(), vb.ncols()).copy_from(vb);
        self.push(v, Op::HCat(a, b))
    }

    /// Rows `start..start + n` of `a`.
    pub fn rows(&mut self, a: Var, start: usize, n: usize) -> Var {
        let v = self.value(a).rows(start, n).into_owned();
        self.push(v, Op::Rows(a, start))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.scalar(s);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).norm_squared());
        self.push(v, Op::SumSq(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn lower_tri(&mut self, diag: Var, off: Var) -> Var {
        let d = self.value(diag);
        let o = self.value(off);
        let p = d.len();
        debug_assert_eq!(o.len(), p * (p.saturating_sub(1)) / 2);
        let mut l = DMatrix::zeros(p, p);
        let mut idx = 0;
        for j in 0..p {
            l[(j, j)] = d[j];
            for i in (j + 1)..p {
                l[(i, j)] = o[idx];
                idx += 1;
            }
        }
        self.push(l, Op::LowerTri { diag, off })
    }

    pub fn diag(&mut self, a: Var) -> Var {
        let d = self.value(a);
        let v = DMatrix::from_diagonal(&d.column(0).into_owned());
        self.push(v, Op::Diag(a))
    }

    /// Column-major reinterpretation to `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        debug_assert_eq!(src.len(), rows * cols);
        let v = DMatrix::from_column_slice(rows, cols, src.as_slice());
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: DMatrix<f64>) -> Gradients {
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        fn acc(grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(b).transpose();
                    let gb = self.value(a).transpose() * &g;
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = &g * self.value(b);
                    let gb = g.transpose() * self.value(a);
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, b, -&g);
                    acc(&mut grads, a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = DMatrix::from_fn(1, g.ncols(), |_, c| g.column(c).sum());
                    acc(&mut grads, row, gr);
                    acc(&mut grads, a, g.clone());
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                    acc(&mut grads, a, ga);
                }
                Op::HCat(a, b) => {
                    let ca = self.value(a).ncols();
                    let cb = self.value(b).ncols();
                    acc(&mut grads, a, g.columns(0, ca).into_owned());
                    acc(&mut grads, b, g.columns(ca, cb).into_owned());
                }
                Op::Rows(a, start) => {
                    let src = self.value(a);
                    let mut ga = DMatrix::zeros(src.nrows(), src.ncols());
                    ga.rows_mut(start, g.nrows()).copy_from(&g);
                    acc(&mut grads, a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, a, &g * s),
                Op::ScaleBy(a, s) => {
                    let gs = g.dot(self.value(a));
                    acc(&mut grads, a, &g * self.scalar(s));
                    acc(&mut grads, s, DMatrix::from_element(1, 1, gs));
                }
                Op::Sum(a) => {
                    let src = self.value(a);
                    acc(
                        &mut grads,
                        a,
                        DMatrix::from_element(src.nrows(), src.ncols(), g[(0, 0)]),
                    );
                }
                Op::SumSq(a) => acc(&mut grads, a, self.value(a) * (2.0 * g[(0, 0)])),
                Op::Exp(a) => acc(&mut grads, a, g.component_mul(&node.value)),
                Op::Log(a) => acc(&mut grads, a, g.component_div(self.value(a))),
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(a), |gi, x| gi * sigmoid(x));
                    acc(&mut grads, a, ga);
                }
                Op::LowerTri { diag, off } => {
                    let p = g.nrows();
                    let gd = DMatrix::from_fn(p, 1, |j, _| g[(j, j)]);
                    let mut go = DMatrix::zeros(p * p.saturating_sub(1) / 2, 1);
                    let mut idx = 0;
                    for j in 0..p {
                        for i in (j + 1)..p {
                            go[idx] = g[(i, j)];
                            idx += 1;
                        }
                    }
                    acc(&mut grads, diag, gd);
                    acc(&mut grads, off, go);
                }
                Op::Diag(a) => {
                    let p = g.nrows();
                    acc(&mut grads, a, DMatrix::from_fn(p, 1, |j, _| g[(j, j)]));
                }
                Op::Reshape(a) => {
                    let src = self.value(a);
                    let ga = DMatrix::from_column_slice(src.nrows(), src.ncols(), g.as_slice());
                    acc(&mut grads, a, ga);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(out)/d(leaf) for a scalar-valued builder.
    fn check<F>(leaf: DMatrix<f64>, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.input(leaf.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out, DMatrix::from_element(1, 1, 1.0));
        let analytic = grads.get_or_zero(x, leaf.shape());
        for idx in 0..leaf.len() {
            let h = 1e-6 * (1.0 + leaf[idx].abs());
            let eval = |delta: f64| {
                let mut m = leaf.clone();
                m[idx] += delta;
                let mut t = Tape::new();
                let xv = t.input(m);
                let o = build(&mut t, xv);
                t.scalar(o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - analytic[idx]).abs() / fd.abs().max(1e-6);
            assert!(
                err < 1e-5,
                "entry {idx}: fd {fd} analytic {}",
                analytic[idx]
            );
        }
    }

    fn m(r: usize, c: usize, vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, vals)
    }

    #[test]
    fn matmul_chain() {
        let w = m(2, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        check(w, |t, w| {
            let x = t.input(m(
                4,
                3,
                &[1., 2., 3., 0.5, -1., 2., 0., 1., -2., 3., 1., 0.],
            ));
            let h = t.matmul_nt(x, w);
            let b = t.input(m(1, 2, &[0.1, -0.3]));
            let z = t.add_row(h, b);
            let a = t.tanh(z);
            t.sum_sq(a)
        });
    }

    #[test]
    fn lower_tri_softplus_reshape() {
        let raw = m(6, 1, &[0.2, -0.4, 1.0, 0.3, -0.7, 0.5]);
        check(raw, |t, raw| {
            let d = t.rows(raw, 1, 3);
            let dpos = t.softplus(d);
            let off = t.input(m(3, 1, &[0.1, 0.2, 0.3]));
            let l = t.lower_tri(dpos, off);
            let eps = t.input(m(3, 1, &[1.0, -0.5, 0.25]));
            let le = t.matmul(l, eps);
            let r = t.reshape(le, 1, 3);
            let logd = t.log(dpos);
            let s1 = t.sum(logd);
            let s2 = t.sum_sq(r);
            t.add(s1, s2)
        });
    }

    #[test]
    fn scale_exp_hcat() {
        let a = m(2, 2, &[0.3, -0.1, 0.2, 0.4]);
        check(a, |t, a| {
            let b = t.input(m(2, 1, &[1.0, 2.0]));
            let c = t.hcat(a, b);
            let s = t.input(m(1, 1, &[-0.3]));
            let e = t.exp(s);
            let d = t.scale_by(c, e);
            let d2 = t.scale(d, 3.0);
            let diff = t.sub(d2, c);
            let dg = t.diag(b);
            let q = t.matmul(dg, diff);
            t.sum_sq(q)
        });
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for &y in &[1e-3, 0.5, 1.0, 7.0, 50.0] {
            assert!((softplus_scalar(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
