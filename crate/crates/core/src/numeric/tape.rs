//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is an append-only list of primitive operations. Every call such
//! as [`Tape::matmul`] evaluates its result immediately (the forward pass) and
//! records the inputs needed to propagate adjoints later. [`Tape::backward`]
//! walks the list once in reverse order, so nodes are always visited after
//! every node that consumes them.
//!
//! Binary elementwise operations broadcast a `1×c`, `r×1` or `1×1` operand
//! against a full `r×c` one; the backward pass sums the adjoint over the
//! broadcast axes.
//!
//! ```
//! use mcei::numeric::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    SumCols(Var),
    HCat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Single-owner expression tape. Independent tapes may be used from different
/// threads; one tape is never shared.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<usize>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, materialising zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[inline]
fn bidx(rows: usize, cols: usize, r: usize, c: usize) -> usize {
    let rr = if rows == 1 { 0 } else { r };
    let cc = if cols == 1 { 0 } else { c };
    rr * cols + cc
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| -> usize {
        if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            panic!("broadcast: incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let (ad, bd) = (a.as_slice(), b.as_slice());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(ad[bidx(ar, ac, i, j)], bd[bidx(br, bc, i, j)]));
        }
    }
    Matrix::from_vec(r, c, out)
}

/// Sums `full` (shape r×c) down to `shape` along broadcast axes.
fn reduce_to(full: Matrix, shape: (usize, usize)) -> Matrix {
    if full.shape() == shape {
        return full;
    }
    let (r, c) = full.shape();
    let mut out = Matrix::zeros(shape.0, shape.1);
    let o = out.as_mut_slice();
    let f = full.as_slice();
    for i in 0..r {
        for j in 0..c {
            o[bidx(shape.0, shape.1, i, j)] += f[i * c + j];
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Index of the first node whose value contained a NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite
    }

    /// `Ok` when every forward value so far is finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some(node) => Err(Error::NonFinite { node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data, frozen noise).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let value = gemm(self.value(a), trans_a, self.value(b), trans_b);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Matrix::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let value = Matrix::column_vector(&sums);
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hcat(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::HCat(parts.to_vec()), rg)
    }

    /// Propagates adjoints from the scalar node `out` to every node that
    /// requires a gradient.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check_finite()?;
        let (rows, cols) = self.value(out).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[out.0] = Some(Matrix::scalar(1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contrib: Matrix) {
        if !self.rg(v) {
            return;
        }
        let contrib = reduce_to(contrib, self.value(v).shape());
        match &mut grads[v.0] {
            Some(g) => g.axpy(1.0, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &self.nodes[i].value;
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let c = broadcast_zip(g, self.value(b), |gv, bv| gv * bv);
                    self.accumulate(grads, a, c);
                }
                if self.rg(b) {
                    let c = broadcast_zip(g, self.value(a), |gv, av| gv * av);
                    self.accumulate(grads, b, c);
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    let c = broadcast_zip(g, self.value(b), |gv, bv| gv / bv);
                    self.accumulate(grads, a, c);
                }
                if self.rg(b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy = g.zip_map(y, |gv, yv| gv * yv);
                    let c = broadcast_zip(&gy, self.value(b), |v, bv| -v / bv);
                    self.accumulate(grads, b, c);
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.rg(a) {
                    let c = if trans_a {
                        gemm(bv, trans_b, g, true)
                    } else {
                        gemm(g, false, bv, !trans_b)
                    };
                    self.accumulate(grads, a, c);
                }
                if self.rg(b) {
                    let c = if trans_b {
                        gemm(g, true, av, trans_a)
                    } else {
                        gemm(av, !trans_a, g, false)
                    };
                    self.accumulate(grads, b, c);
                }
            }
            Op::Neg(a) => self.accumulate(grads, a, g.map(|x| -x)),
            Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            Op::Offset(a) => self.accumulate(grads, a, g.clone()),
            Op::Tanh(a) => self.accumulate(grads, a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Relu(a) => {
                let c = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, a, c)
            }
            Op::Softplus(a) => {
                let c = g.zip_map(self.value(a), |gv, x| gv * sigmoid(x));
                self.accumulate(grads, a, c)
            }
            Op::Exp(a) => self.accumulate(grads, a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Ln(a) => {
                let c = g.zip_map(self.value(a), |gv, x| gv / x);
                self.accumulate(grads, a, c)
            }
            Op::Square(a) => {
                let c = g.zip_map(self.value(a), |gv, x| 2.0 * gv * x);
                self.accumulate(grads, a, c)
            }
            Op::Sum(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(grads, a, Matrix::filled(r, c, g.item()))
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(a).shape();
                let mut out = Matrix::zeros(r, c);
                for row in 0..r {
                    let gv = g.get(row, 0);
                    out.row_mut(row).iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(grads, a, out)
            }
            Op::HCat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let idx: Vec<usize> = (off..off + pc).collect();
                        self.accumulate(grads, p, g.select_columns(&idx));
                    }
                    off += pc;
                }
            }
        }
    }
}
