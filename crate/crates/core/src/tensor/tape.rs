//! Single-use computation tape for reverse-mode differentiation.
//!
//! Operations on [`Var`] handles append nodes to the owning [`Tape`]; nodes
//! reference earlier nodes only, so reverse node order is a valid reverse
//! topological order for the backward sweep. The tape is consumed by one
//! `backward` call; recording onto or re-differentiating a consumed tape is
//! an error rather than silent accumulation. A tape is confined to one
//! thread (`Rc` interior); plain [`Tensor`]s travel between threads instead.

use std::cell::RefCell;
use std::rc::Rc;

use super::{check_same_shape, Tensor};
use crate::{Error, Result};

/// Guard for the l2-norm adjoint at the origin.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct TapeOptions {
    /// When false (default), elementwise div by a tensor containing zero is
    /// an error; when true the IEEE Inf/NaN result passes through.
    pub allow_div_by_zero: bool,
}

impl Default for TapeOptions {
    fn default() -> Self {
        TapeOptions {
            allow_div_by_zero: false,
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    MatVec {
        a: usize,
        x: usize,
        m: usize,
        k: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    Sum(usize),
    Frame {
        src: usize,
        offset: usize,
    },
    L2Norm(usize),
    Ln(usize),
    Clamp {
        src: usize,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
    options: TapeOptions,
}

/// Recording tape. Cloning yields another handle to the same tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_options(TapeOptions::default())
    }

    pub fn with_options(options: TapeOptions) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
                options,
            })),
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var {
            tape: self.clone(),
            id,
        })
    }

    /// Register a leaf that participates in differentiation.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    /// Register a non-differentiated constant.
    pub fn constant(&self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn same_tape(&self, other: &Tape) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &other.inner) {
            return Err(Error::TapeMismatch);
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root. Fills gradients of every reachable
    /// leaf with `requires_grad`, then marks the tape consumed.
    pub fn backward(&self, root: &Var) -> Result<()> {
        self.same_tape(&root.tape)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_len = inner.nodes[root.id].value.len();
        if root_len != 1 {
            return Err(Error::NonScalarRoot(root_len));
        }
        inner.consumed = true;
        inner.nodes[root.id].grad = Some(vec![1.0]);

        for i in (0..inner.nodes.len()).rev() {
            if !inner.nodes[i].requires_grad || inner.nodes[i].grad.is_none() {
                continue;
            }
            let g = inner.nodes[i].grad.take().unwrap();
            backprop_node(&mut inner.nodes, i, &g);
            inner.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

/// Ensure a grad buffer exists for `id` (only called for requires_grad nodes).
fn grad_buf<'a>(nodes: &'a mut [Node], id: usize) -> &'a mut [f64] {
    let len = nodes[id].value.len();
    nodes[id].grad.get_or_insert_with(|| vec![0.0; len])
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backprop_node(nodes: &mut [Node], i: usize, g: &[f64]) {
    // Split borrows by copying the small per-op metadata out first.
    match nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(nodes, a) {
                let ga = grad_buf(nodes, a);
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if needs(nodes, b) {
                let gb = grad_buf(nodes, b);
                for (d, &gi) in gb.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(nodes, a) {
                let ga = grad_buf(nodes, a);
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if needs(nodes, b) {
                let gb = grad_buf(nodes, b);
                for (d, &gi) in gb.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            if needs(nodes, a) {
                let bv = nodes[b].value.clone();
                let ga = grad_buf(nodes, a);
                for ((d, &gi), &bv) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += gi * bv;
                }
            }
            if needs(nodes, b) {
                let av = nodes[a].value.clone();
                let gb = grad_buf(nodes, b);
                for ((d, &gi), &av) in gb.iter_mut().zip(g).zip(&av) {
                    *d += gi * av;
                }
            }
        }
        Op::Div(a, b) => {
            if needs(nodes, a) {
                let bv = nodes[b].value.clone();
                let ga = grad_buf(nodes, a);
                for ((d, &gi), &bv) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += gi / bv;
                }
            }
            if needs(nodes, b) {
                let av = nodes[a].value.clone();
                let bv = nodes[b].value.clone();
                let gb = grad_buf(nodes, b);
                for (j, d) in gb.iter_mut().enumerate() {
                    *d -= g[j] * av[j] / (bv[j] * bv[j]);
                }
            }
        }
        Op::AddScalar(a) => {
            if needs(nodes, a) {
                let ga = grad_buf(nodes, a);
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::MulScalar(a, s) => {
            if needs(nodes, a) {
                let ga = grad_buf(nodes, a);
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            if needs(nodes, a) {
                // dA = g . B^T
                let bv = nodes[b].value.clone();
                let ga = grad_buf(nodes, a);
                for r in 0..m {
                    for c in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[r * n + j] * bv[c * n + j];
                        }
                        ga[r * k + c] += acc;
                    }
                }
            }
            if needs(nodes, b) {
                // dB = A^T . g
                let av = nodes[a].value.clone();
                let gb = grad_buf(nodes, b);
                for r in 0..m {
                    for c in 0..k {
                        let arc = av[r * k + c];
                        if arc == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[c * n + j] += arc * g[r * n + j];
                        }
                    }
                }
            }
        }
        Op::MatVec { a, x, m, k } => {
            if needs(nodes, a) {
                // dA = g (outer) x
                let xv = nodes[x].value.clone();
                let ga = grad_buf(nodes, a);
                for r in 0..m {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let row = &mut ga[r * k..(r + 1) * k];
                    for (d, &xv) in row.iter_mut().zip(&xv) {
                        *d += gr * xv;
                    }
                }
            }
            if needs(nodes, x) {
                // dx = A^T . g
                let av = nodes[a].value.clone();
                let gx = grad_buf(nodes, x);
                for r in 0..m {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let row = &av[r * k..(r + 1) * k];
                    for (d, &ar) in gx.iter_mut().zip(row) {
                        *d += gr * ar;
                    }
                }
            }
        }
        Op::Tanh(a) => {
            if needs(nodes, a) {
                let yv = nodes[i].value.clone();
                let ga = grad_buf(nodes, a);
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(&yv) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(a) => {
            if needs(nodes, a) {
                let yv = nodes[i].value.clone();
                let ga = grad_buf(nodes, a);
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(&yv) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Relu(a) => {
            // Subgradient at exactly 0 is 0, keeping runs deterministic.
            if needs(nodes, a) {
                let xv = nodes[a].value.clone();
                let ga = grad_buf(nodes, a);
                for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(&xv) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if needs(nodes, a) {
                let yv = nodes[i].value.clone();
                let dot: f64 = g.iter().zip(&yv).map(|(&gi, &y)| gi * y).sum();
                let ga = grad_buf(nodes, a);
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(&yv) {
                    *d += y * (gi - dot);
                }
            }
        }
        Op::Sum(a) => {
            if needs(nodes, a) {
                let gs = g[0];
                let ga = grad_buf(nodes, a);
                for d in ga.iter_mut() {
                    *d += gs;
                }
            }
        }
        Op::Frame { src, offset } => {
            if needs(nodes, src) {
                let gsrc = grad_buf(nodes, src);
                for (d, &gi) in gsrc[offset..offset + g.len()].iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::L2Norm(a) => {
            if needs(nodes, a) {
                let norm = nodes[i].value[0];
                let scale = g[0] / norm.max(NORM_EPS);
                let xv = nodes[a].value.clone();
                let ga = grad_buf(nodes, a);
                for (d, &x) in ga.iter_mut().zip(&xv) {
                    *d += scale * x;
                }
            }
        }
        Op::Ln(a) => {
            if needs(nodes, a) {
                let xv = nodes[a].value.clone();
                let ga = grad_buf(nodes, a);
                for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(&xv) {
                    *d += gi / x;
                }
            }
        }
        Op::Clamp { src, lo, hi } => {
            if needs(nodes, src) {
                let xv = nodes[src].value.clone();
                let gsrc = grad_buf(nodes, src);
                for ((d, &gi), &x) in gsrc.iter_mut().zip(g).zip(&xv) {
                    if x >= lo && x <= hi {
                        *d += gi;
                    }
                }
            }
        }
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape consistent")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        debug_assert_eq!(node.value.len(), 1);
        node.value[0]
    }

    /// Accumulated gradient, available after `backward` for nodes with
    /// `requires_grad` that the root reaches.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.shape.clone(), g.clone()).expect("grad shape consistent"))
    }

    fn binary(&self, other: &Var, op: &'static str) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>, bool)> {
        self.tape.same_tape(&other.tape)?;
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        check_same_shape(op, &a.shape, &b.shape)?;
        Ok((
            a.shape.clone(),
            a.value.clone(),
            b.value.clone(),
            a.requires_grad || b.requires_grad,
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let (shape, av, bv, rg) = self.binary(other, "add")?;
        let out = av.iter().zip(&bv).map(|(x, y)| x + y).collect();
        self.tape.push(shape, out, rg, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let (shape, av, bv, rg) = self.binary(other, "sub")?;
        let out = av.iter().zip(&bv).map(|(x, y)| x - y).collect();
        self.tape.push(shape, out, rg, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let (shape, av, bv, rg) = self.binary(other, "mul")?;
        let out = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        self.tape.push(shape, out, rg, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        let (shape, av, bv, rg) = self.binary(other, "div")?;
        if !self.tape.inner.borrow().options.allow_div_by_zero && bv.iter().any(|&y| y == 0.0) {
            return Err(Error::DivisionByZero);
        }
        let out = av.iter().zip(&bv).map(|(x, y)| x / y).collect();
        self.tape.push(shape, out, rg, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        let out = node.value.iter().map(|x| x + s).collect();
        drop(inner);
        self.tape.push(shape, out, rg, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        let out = node.value.iter().map(|x| x * s).collect();
        drop(inner);
        self.tape.push(shape, out, rg, Op::MulScalar(self.id, s))
    }

    pub fn neg(&self) -> Result<Var> {
        self.mul_scalar(-1.0)
    }

    /// Rank-2 by rank-2 matrix product.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.tape.same_tape(&other.tape)?;
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        if a.shape.len() != 2 {
            return Err(Error::RankMismatch {
                what: "matmul lhs",
                expected: 2,
                found: a.shape.len(),
            });
        }
        if b.shape.len() != 2 {
            return Err(Error::RankMismatch {
                what: "matmul rhs",
                expected: 2,
                found: b.shape.len(),
            });
        }
        let (m, k) = (a.shape[0], a.shape[1]);
        let (k2, n) = (b.shape[0], b.shape[1]);
        if k != k2 {
            return Err(Error::InnerDimMismatch(k, k2));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..k {
                let arc = a.value[r * k + c];
                if arc == 0.0 {
                    continue;
                }
                let brow = &b.value[c * n..(c + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += arc * bv;
                }
            }
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        self.tape.push(
            vec![m, n],
            out,
            rg,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        )
    }

    /// Rank-2 matrix times rank-1 vector.
    pub fn matvec(&self, x: &Var) -> Result<Var> {
        self.tape.same_tape(&x.tape)?;
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let xv = &inner.nodes[x.id];
        if a.shape.len() != 2 {
            return Err(Error::RankMismatch {
                what: "matvec lhs",
                expected: 2,
                found: a.shape.len(),
            });
        }
        if xv.shape.len() != 1 {
            return Err(Error::RankMismatch {
                what: "matvec rhs",
                expected: 1,
                found: xv.shape.len(),
            });
        }
        let (m, k) = (a.shape[0], a.shape[1]);
        if k != xv.shape[0] {
            return Err(Error::InnerDimMismatch(k, xv.shape[0]));
        }
        let mut out = vec![0.0; m];
        for r in 0..m {
            let row = &a.value[r * k..(r + 1) * k];
            let mut acc = 0.0;
            for (av, xv) in row.iter().zip(&xv.value) {
                acc += av * xv;
            }
            out[r] = acc;
        }
        let rg = a.requires_grad || xv.requires_grad;
        drop(inner);
        self.tape.push(
            vec![m],
            out,
            rg,
            Op::MatVec {
                a: self.id,
                x: x.id,
                m,
                k,
            },
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        let out = node.value.iter().map(|&x| f(x)).collect();
        drop(inner);
        self.tape.push(shape, out, rg, op(self.id))
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn ln(&self) -> Result<Var> {
        self.unary(f64::ln, Op::Ln)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        self.unary(|x| x.clamp(lo, hi), |src| Op::Clamp { src, lo, hi })
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.shape.len() != 1 {
            return Err(Error::RankMismatch {
                what: "softmax",
                expected: 1,
                found: node.shape.len(),
            });
        }
        if node.value.is_empty() {
            return Err(Error::Config("softmax on empty tensor".into()));
        }
        let max = node.value.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = node.value.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(inner);
        self.tape.push(shape, out, rg, Op::Softmax(self.id))
    }

    /// Sum of all elements, as a single-element tensor.
    pub fn sum(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let total: f64 = node.value.iter().sum();
        let rg = node.requires_grad;
        drop(inner);
        self.tape.push(vec![1], vec![total], rg, Op::Sum(self.id))
    }

    /// Frame `t` of a rank-4 tensor, flattened to rank 1 (row-major frames
    /// are contiguous).
    pub fn frame(&self, t: usize) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.shape.len() != 4 {
            return Err(Error::RankMismatch {
                what: "frame",
                expected: 4,
                found: node.shape.len(),
            });
        }
        let per = node.shape[1] * node.shape[2] * node.shape[3];
        if t >= node.shape[0] {
            return Err(Error::Config(format!(
                "frame index {t} out of range for {} frames",
                node.shape[0]
            )));
        }
        let offset = t * per;
        let out = node.value[offset..offset + per].to_vec();
        let rg = node.requires_grad;
        drop(inner);
        self.tape.push(
            vec![per],
            out,
            rg,
            Op::Frame {
                src: self.id,
                offset,
            },
        )
    }

    /// Euclidean norm of all elements, as a single-element tensor. The
    /// adjoint is `x / max(norm, 1e-12)`.
    pub fn l2_norm(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let sq: f64 = node.value.iter().map(|x| x * x).sum();
        let rg = node.requires_grad;
        drop(inner);
        self.tape
            .push(vec![1], vec![sq.sqrt()], rg, Op::L2Norm(self.id))
    }

    /// Mean of all elements.
    pub fn mean(&self) -> Result<Var> {
        let n = self.len() as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn add_values() {
        let tape = Tape::new();
        let a = tape.leaf(&t1(&[1.0, 2.0]), false).unwrap();
        let b = tape.leaf(&t1(&[3.0, 4.0]), false).unwrap();
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_has_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[2.0, -3.0]), true).unwrap();
        let z = tape.constant(&t1(&[0.0, 0.0])).unwrap();
        let y = x.mul(&z).unwrap().sum().unwrap();
        assert_eq!(y.item(), 0.0);
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&t1(&[1.0, 2.0]), false).unwrap();
        let b = tape.leaf(&Tensor::scalar(1.0), false).unwrap();
        match a.add(&b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![1]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn div_by_zero_flag() {
        let tape = Tape::new();
        let a = tape.leaf(&t1(&[1.0]), false).unwrap();
        let b = tape.leaf(&t1(&[0.0]), false).unwrap();
        assert!(matches!(a.div(&b), Err(Error::DivisionByZero)));

        let tape = Tape::with_options(TapeOptions {
            allow_div_by_zero: true,
        });
        let a = tape.leaf(&t1(&[1.0]), false).unwrap();
        let b = tape.leaf(&t1(&[0.0]), false).unwrap();
        assert!(a.div(&b).unwrap().value().data()[0].is_infinite());
    }

    #[test]
    fn matmul_identity_and_small() {
        let tape = Tape::new();
        let eye = tape
            .leaf(
                &Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                false,
            )
            .unwrap();
        let b = tape
            .leaf(&Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap(), false)
            .unwrap();
        assert_eq!(eye.matmul(&b).unwrap().value().data(), &[5.0, 7.0]);

        let a = tape
            .leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        let ones = tape
            .leaf(&Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(), false)
            .unwrap();
        assert_eq!(a.matmul(&ones).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let tape = Tape::new();
        let a = tape
            .leaf(&Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap(), false)
            .unwrap();
        let b = tape
            .leaf(&Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap(), false)
            .unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::InnerDimMismatch(3, 2))));
    }

    #[test]
    fn activations_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[0.0]), true).unwrap();
        assert_eq!(x.tanh().unwrap().item(), 0.0);
        assert_eq!(x.sigmoid().unwrap().item(), 0.5);
        let r = tape.leaf(&t1(&[-3.0]), true).unwrap();
        let y = r.relu().unwrap();
        assert_eq!(y.item(), 0.0);
        let s = y.sum().unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(r.grad().unwrap().data(), &[0.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[0.0, 0.0]), false).unwrap();
        assert_eq!(x.softmax().unwrap().value().data(), &[0.5, 0.5]);

        let big = tape.leaf(&t1(&[1000.0, 0.0]), false).unwrap();
        let s = big.softmax().unwrap().value();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        let total: f64 = s.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, 2.0, 3.0]), true).unwrap();
        let s = x.sum().unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_squared_norm_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, -2.0, 0.5]), true).unwrap();
        let s = x.mul(&x).unwrap().sum().unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, 2.0]), true).unwrap();
        let y = x.mul_scalar(2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::NonScalarRoot(2))));
    }

    #[test]
    fn tape_is_single_use() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0]), true).unwrap();
        let s = x.sum().unwrap();
        tape.backward(&s).unwrap();
        assert!(matches!(tape.backward(&s), Err(Error::TapeConsumed)));
        assert!(matches!(x.mul_scalar(2.0), Err(Error::TapeConsumed)));
    }

    #[test]
    fn cross_tape_operands_rejected() {
        let t1_ = Tape::new();
        let t2_ = Tape::new();
        let a = t1_.leaf(&t1(&[1.0]), false).unwrap();
        let b = t2_.leaf(&t1(&[1.0]), false).unwrap();
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn frame_extraction_and_grad_scatter() {
        let tape = Tape::new();
        let v = Tensor::new(vec![2, 1, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = tape.leaf(&v, true).unwrap();
        let f1 = x.frame(1).unwrap();
        assert_eq!(f1.value().data(), &[3.0, 4.0]);
        let s = f1.sum().unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn l2_norm_guarded_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[0.0, 0.0]), true).unwrap();
        let n = x.l2_norm().unwrap();
        assert_eq!(n.item(), 0.0);
        tape.backward(&n).unwrap();
        let g = x.grad().unwrap();
        assert!(g.all_finite());
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_linear_in_roots() {
        // grad of (2. f + 3 . g) equals 2 . grad f + 3 . grad g on shared leaves.
        let input = t1(&[0.3, -0.7, 1.1]);
        let run = |wf: f64, wg: f64| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(&input, true).unwrap();
            let f = x.mul(&x).unwrap().sum().unwrap();
            let g = x.tanh().unwrap().sum().unwrap();
            let combo = f
                .mul_scalar(wf)
                .unwrap()
                .add(&g.mul_scalar(wg).unwrap())
                .unwrap();
            tape.backward(&combo).unwrap();
            x.grad().unwrap().into_data()
        };
        let gf = run(1.0, 0.0);
        let gg = run(0.0, 1.0);
        let both = run(2.0, 3.0);
        for i in 0..3 {
            assert!((both[i] - (2.0 * gf[i] + 3.0 * gg[i])).abs() < 1e-9);
        }
    }
}
