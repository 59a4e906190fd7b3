use std::cell::RefCell;
use std::collections::HashMap;

use super::broadcast::{self, Layout};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Index of a recorded node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Binary(BinaryKind, NodeId, NodeId, Layout, Layout),
    Scale(NodeId, E),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Clip(NodeId, E, E),
    Sign,
    ShiftedSoftplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, AxisSplit),
    MeanAxis(NodeId, AxisSplit),
    LogSumExp(NodeId, AxisSplit),
    LogSoftmax(NodeId),
    Softmax(NodeId),
    Reshape(NodeId),
    Columns(NodeId, usize, usize),
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// A tensor shape viewed as `[outer, len, inner]` around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::Axis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

#[derive(Debug)]
struct Inner<E: Element> {
    nodes: Vec<Node<E>>,
    differentiated: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// A tape is owned by one caller and never shared between threads. Handles
/// ([`Var`]) borrow the tape, so `reset` can only run once they are dropped.
#[derive(Debug)]
pub struct Tape<E: Element = f64> {
    inner: RefCell<Inner<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element = f64> {
    tape: &'t Tape<E>,
    id: NodeId,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
#[derive(Debug)]
pub struct Gradients<E: Element = f64> {
    grads: HashMap<NodeId, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: &Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(&var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(&id)
    }

    /// Gradient of `var`, or zeros if nothing flowed into it.
    pub fn wrt(&self, var: &Var<'_, E>) -> Tensor<E> {
        self.grads
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                differentiated: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all recorded nodes so the tape can be used again.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.differentiated = false;
    }

    /// Record a tensor that gradients should flow into.
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, true)
    }

    /// Record a tensor treated as a constant by `backward`.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var<'_, E> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Tensor<E> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse sweep from a scalar loss. Every attached ancestor of `loss`
    /// that requires a gradient gets one; unrelated nodes get none.
    pub fn backward(&self, loss: &Var<'_, E>) -> Result<Gradients<E>> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if inner.differentiated {
            return Err(Error::TapeConsumed);
        }
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        inner.differentiated = true;
        let nodes = &inner.nodes;

        let mut grads: Vec<Option<Vec<E>>> = vec![None; loss.id + 1];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![E::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            propagate(nodes, id, &node.op, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| {
                g.map(|g| (id, Tensor::from_parts(nodes[id].value.shape().to_vec(), g)))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], id: NodeId, delta: Vec<E>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn propagate<E: Element>(
    nodes: &[Node<E>],
    id: NodeId,
    op: &Op<E>,
    g: &[E],
    grads: &mut [Option<Vec<E>>],
) -> Result<()> {
    let needs = |i: NodeId| nodes[i].requires_grad;
    let val = |i: NodeId| nodes[i].value.data();
    let out = nodes[id].value.data();
    match *op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            if needs(a) {
                // dA = G · Bᵀ
                let mut da = vec![E::zero(); m * k];
                unsafe {
                    E::gemm(
                        m,
                        n,
                        k,
                        E::one(),
                        g.as_ptr(),
                        n as isize,
                        1,
                        val(b).as_ptr(),
                        1,
                        n as isize,
                        E::zero(),
                        da.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                accumulate(grads, a, da);
            }
            if needs(b) {
                // dB = Aᵀ · G
                let mut db = vec![E::zero(); k * n];
                unsafe {
                    E::gemm(
                        k,
                        m,
                        n,
                        E::one(),
                        val(a).as_ptr(),
                        1,
                        k as isize,
                        g.as_ptr(),
                        n as isize,
                        1,
                        E::zero(),
                        db.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                accumulate(grads, b, db);
            }
        }
        Op::Binary(kind, a, b, ref la, ref lb) => {
            let (va, vb) = (val(a), val(b));
            if needs(a) {
                let full: Vec<E> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * vb[lb.index(i)])
                        .collect(),
                    BinaryKind::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi / vb[lb.index(i)])
                        .collect(),
                };
                accumulate(grads, a, broadcast::reduce(&full, la, va.len()));
            }
            if needs(b) {
                let full: Vec<E> = match kind {
                    BinaryKind::Add => g.to_vec(),
                    BinaryKind::Sub => g.iter().map(|&gi| -gi).collect(),
                    BinaryKind::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * va[la.index(i)])
                        .collect(),
                    BinaryKind::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let d = vb[lb.index(i)];
                            -gi * va[la.index(i)] / (d * d)
                        })
                        .collect(),
                };
                accumulate(grads, b, broadcast::reduce(&full, lb, vb.len()));
            }
        }
        Op::Scale(a, c) => {
            if needs(a) {
                accumulate(grads, a, g.iter().map(|&gi| gi * c).collect());
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if needs(a) {
                accumulate(grads, a, g.to_vec());
            }
        }
        Op::Relu(a) => {
            if needs(a) {
                let x = val(a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > E::zero() { gi } else { E::zero() })
                    .collect();
                accumulate(grads, a, d);
            }
        }
        Op::Exp(a) => {
            if needs(a) {
                accumulate(grads, a, g.iter().zip(out).map(|(&gi, &y)| gi * y).collect());
            }
        }
        Op::Log(a) => {
            if needs(a) {
                let x = val(a);
                accumulate(grads, a, g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect());
            }
        }
        Op::Square(a) => {
            if needs(a) {
                let two = E::of(2.0);
                let x = val(a);
                accumulate(
                    grads,
                    a,
                    g.iter().zip(x).map(|(&gi, &xi)| two * xi * gi).collect(),
                );
            }
        }
        Op::Clip(a, lo, hi) => {
            if needs(a) {
                let x = val(a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > lo && xi < hi { gi } else { E::zero() })
                    .collect();
                accumulate(grads, a, d);
            }
        }
        Op::Sign => return Err(Error::NonDifferentiable("sign")),
        Op::Columns(a, start, width) => {
            if needs(a) {
                let cols = nodes[a].value.shape()[1];
                let mut d = vec![E::zero(); val(a).len()];
                for (dr, gr) in d.chunks_mut(cols).zip(g.chunks(width)) {
                    dr[start..start + width].copy_from_slice(gr);
                }
                accumulate(grads, a, d);
            }
        }
        Op::ShiftedSoftplus(a) => {
            if needs(a) {
                let x = val(a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * sigmoid(xi - E::of(SOFTPLUS_SHIFT)))
                    .collect();
                accumulate(grads, a, d);
            }
        }
        Op::Sum(a) => {
            if needs(a) {
                accumulate(grads, a, vec![g[0]; val(a).len()]);
            }
        }
        Op::Mean(a) => {
            if needs(a) {
                let n = val(a).len();
                accumulate(grads, a, vec![g[0] / E::of(n as f64); n]);
            }
        }
        Op::SumAxis(a, s) | Op::MeanAxis(a, s) => {
            if needs(a) {
                let scale = match op {
                    Op::MeanAxis(..) => E::one() / E::of(s.len as f64),
                    _ => E::one(),
                };
                let mut d = vec![E::zero(); s.outer * s.len * s.inner];
                for o in 0..s.outer {
                    for l in 0..s.len {
                        for i in 0..s.inner {
                            d[(o * s.len + l) * s.inner + i] = g[o * s.inner + i] * scale;
                        }
                    }
                }
                accumulate(grads, a, d);
            }
        }
        Op::LogSumExp(a, s) => {
            if needs(a) {
                let x = val(a);
                let mut d = vec![E::zero(); x.len()];
                for o in 0..s.outer {
                    for l in 0..s.len {
                        for i in 0..s.inner {
                            let j = (o * s.len + l) * s.inner + i;
                            let r = o * s.inner + i;
                            d[j] = g[r] * (x[j] - out[r]).exp();
                        }
                    }
                }
                accumulate(grads, a, d);
            }
        }
        Op::LogSoftmax(a) => {
            if needs(a) {
                let cols = *nodes[a].value.shape().last().unwrap_or(&1);
                let mut d = vec![E::zero(); g.len()];
                for ((dr, gr), yr) in d
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.chunks(cols))
                {
                    let total = gr.iter().fold(E::zero(), |s, &v| s + v);
                    for ((di, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *di = gi - yi.exp() * total;
                    }
                }
                accumulate(grads, a, d);
            }
        }
        Op::Softmax(a) => {
            if needs(a) {
                let cols = *nodes[a].value.shape().last().unwrap_or(&1);
                let mut d = vec![E::zero(); g.len()];
                for ((dr, gr), yr) in d
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.chunks(cols))
                {
                    let dot = gr.iter().zip(yr).fold(E::zero(), |s, (&gi, &yi)| s + gi * yi);
                    for ((di, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *di = yi * (gi - dot);
                    }
                }
                accumulate(grads, a, d);
            }
        }
    }
    Ok(())
}

pub(crate) const SOFTPLUS_SHIFT: f64 = 5.0;

fn sigmoid<E: Element>(t: E) -> E {
    if t >= E::zero() {
        E::one() / (E::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (E::one() + e)
    }
}

/// `log(1 + exp(x - 5))`, switching to the asymptotic forms beyond |x - 5| > 30.
pub fn shifted_softplus<E: Element>(x: E) -> E {
    let t = x - E::of(SOFTPLUS_SHIFT);
    let bound = E::of(30.0);
    if t > bound {
        t
    } else if t < -bound {
        t.exp()
    } else {
        t.exp().ln_1p()
    }
}

fn row_logsumexp<E: Element>(row: &[E]) -> E {
    let m = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
    if m == E::infinity() || m == E::neg_infinity() {
        return m;
    }
    let s = row.iter().fold(E::zero(), |s, &v| s + (v - m).exp());
    m + s.ln()
}

impl<'t, E: Element> Var<'t, E> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Tensor<E> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> E {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    fn unary(&self, value: Tensor<E>, op: Op<E>) -> Var<'t, E> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn map(&self, op: Op<E>, f: impl Fn(E) -> E) -> Var<'t, E> {
        let v = self.value().map(f);
        self.unary(v, op)
    }

    fn same_tape(&self, other: &Var<'_, E>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![E::zero(); m * n];
        if m > 0 && n > 0 {
            unsafe {
                E::gemm(
                    m,
                    k,
                    n,
                    E::one(),
                    a.data().as_ptr(),
                    k as isize,
                    1,
                    b.data().as_ptr(),
                    n as isize,
                    1,
                    E::zero(),
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![m, n], c), Op::MatMul(self.id, rhs.id), rg))
    }

    fn binary(
        &self,
        rhs: &Var<'t, E>,
        kind: BinaryKind,
        name: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> Result<Var<'t, E>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let shape = broadcast::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let la = broadcast::layout(a.shape(), &shape);
        let lb = broadcast::layout(b.shape(), &shape);
        let numel: usize = shape.iter().product();
        let (da, db) = (a.data(), b.data());
        let data: Vec<E> = match (&la, &lb) {
            (Layout::Same, Layout::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Layout::Same, Layout::Cycle(p)) => da
                .chunks(*p)
                .flat_map(|chunk| chunk.iter().zip(db).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => (0..numel)
                .map(|i| f(da[la.index(i)], db[lb.index(i)]))
                .collect(),
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Binary(kind, self.id, rhs.id, la, lb),
            rg,
        ))
    }

    pub fn add(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(rhs, BinaryKind::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(rhs, BinaryKind::Sub, "sub", |x, y| x - y)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(rhs, BinaryKind::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(rhs, BinaryKind::Div, "div", |x, y| x / y)
    }

    pub fn scale(&self, c: E) -> Var<'t, E> {
        self.map(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<'t, E> {
        self.scale(-E::one())
    }

    pub fn add_scalar(&self, c: E) -> Var<'t, E> {
        self.map(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn relu(&self) -> Var<'t, E> {
        self.map(Op::Relu(self.id), |x| x.max(E::zero()))
    }

    pub fn exp(&self) -> Var<'t, E> {
        self.map(Op::Exp(self.id), |x| x.exp())
    }

    pub fn log(&self) -> Var<'t, E> {
        self.map(Op::Log(self.id), |x| x.ln())
    }

    pub fn square(&self) -> Var<'t, E> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    /// Clamp to `[lo, hi]`. Gradient passes strictly inside the interval and
    /// is zero at or beyond the bounds.
    pub fn clip(&self, lo: E, hi: E) -> Var<'t, E> {
        self.map(Op::Clip(self.id, lo, hi), |x| x.max(lo).min(hi))
    }

    /// Elementwise sign with `sign(0) = 0`. Forward-only: `backward` fails if
    /// a gradient has to flow through it.
    pub fn sign(&self) -> Var<'t, E> {
        self.map(Op::Sign, sign)
    }

    pub fn shifted_softplus(&self) -> Var<'t, E> {
        self.map(Op::ShiftedSoftplus(self.id), shifted_softplus)
    }

    pub fn sum(&self) -> Var<'t, E> {
        let v = self.value();
        let s = v.data().iter().fold(E::zero(), |s, &x| s + x);
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, E> {
        let v = self.value();
        let s = v.data().iter().fold(E::zero(), |s, &x| s + x);
        let n = E::of(v.numel() as f64);
        self.unary(Tensor::scalar(s / n), Op::Mean(self.id))
    }

    fn reduce_axis(
        &self,
        axis: usize,
        name: &'static str,
        f: impl Fn(&[E]) -> E,
        op: impl FnOnce(AxisSplit) -> Op<E>,
    ) -> Result<Var<'t, E>> {
        let v = self.value();
        let s = AxisSplit::new(name, v.shape(), axis)?;
        let x = v.data();
        let mut out = Vec::with_capacity(s.outer * s.inner);
        let mut buf = vec![E::zero(); s.len];
        for o in 0..s.outer {
            for i in 0..s.inner {
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = x[(o * s.len + l) * s.inner + i];
                }
                out.push(f(&buf));
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Tensor::from_parts(shape, out), op(s)))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, E>> {
        let id = self.id;
        self.reduce_axis(
            axis,
            "sum_axis",
            |r| r.iter().fold(E::zero(), |s, &x| s + x),
            |s| Op::SumAxis(id, s),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, E>> {
        let id = self.id;
        self.reduce_axis(
            axis,
            "mean_axis",
            |r| r.iter().fold(E::zero(), |s, &x| s + x) / E::of(r.len() as f64),
            |s| Op::MeanAxis(id, s),
        )
    }

    /// Numerically stable `log Σ exp` over `axis`, dropping it.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t, E>> {
        let id = self.id;
        self.reduce_axis(axis, "logsumexp", row_logsumexp, |s| Op::LogSumExp(id, s))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'t, E> {
        let v = self.value();
        let cols = *v.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols.max(1)) {
            let lse = row_logsumexp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        self.unary(
            Tensor::from_parts(v.shape().to_vec(), out),
            Op::LogSoftmax(self.id),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, E> {
        let v = self.value();
        let cols = *v.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols.max(1)) {
            let m = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
            let start = out.len();
            let mut total = E::zero();
            for &x in row {
                let e = (x - m).exp();
                total = total + e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o = *o / total;
            }
        }
        self.unary(
            Tensor::from_parts(v.shape().to_vec(), out),
            Op::Softmax(self.id),
        )
    }

    /// Columns `start..start + width` of a rank-2 var.
    pub fn columns(&self, start: usize, width: usize) -> Result<Var<'t, E>> {
        let v = self.value();
        if v.rank() != 2 || start + width > v.shape()[1] {
            return Err(Error::Shape {
                op: "columns",
                lhs: v.shape().to_vec(),
                rhs: vec![start, start + width],
            });
        }
        let cols = v.shape()[1];
        let mut out = Vec::with_capacity(v.shape()[0] * width);
        for row in v.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + width]);
        }
        Ok(self.unary(
            Tensor::from_parts(vec![v.shape()[0], width], out),
            Op::Columns(self.id, start, width),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t, E>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }
}

pub(crate) fn sign<E: Element>(x: E) -> E {
    if x > E::zero() {
        E::one()
    } else if x < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}
