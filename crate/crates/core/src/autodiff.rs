//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to [`Var`] handles in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks the tape in reverse once, accumulating vector-Jacobian products into
//! per-node gradient buffers, and then frees the tape.
//!
//! Subgradient conventions at kinks: `max_axis` routes to the first
//! attaining index, `relu(0)` has derivative 0, and `clamp` passes the
//! gradient through when the input lies on the closed interval.

use std::cell::RefCell;

use thiserror::Error;

use crate::hypgeo::{ATANH_MAX, MIN_NORM};
use crate::tensor::{gemm, ShapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by backward")]
    GraphConsumed,
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("variable belongs to a different graph")]
    ForeignVar,
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    MaxAxis { input: usize, axis: usize, argmax: Vec<usize> },
    Concat(Vec<usize>),
    Tanh(usize),
    Atanh(usize),
    AcoshSafe(usize),
    Sqrt(usize),
    Square(usize),
    Dot(usize, usize),
    Norm(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Relu(usize),
    Log(usize),
    Exp(usize),
    Softmax(usize),
    Neg(usize),
    Scale(usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// A single-use computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    tape: RefCell<Tape>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// How two operand shapes combine in an elementwise binary op.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// rhs has one element
    RhsScalar,
    /// lhs has one element
    LhsScalar,
    /// lhs is `[r, n]`, rhs is `[n]`
    RhsRow,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 {
        Ok(Broadcast::RhsScalar)
    } else if a.len() == 1 {
        Ok(Broadcast::LhsScalar)
    } else if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
        Ok(Broadcast::RhsRow)
    } else {
        Err(ShapeError::Mismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into())
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (shape, data): (Vec<usize>, Vec<f64>) = match kind {
        Broadcast::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::RhsScalar => {
            let y = b.data()[0];
            (a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
        }
        Broadcast::LhsScalar => {
            let x = a.data()[0];
            (b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
        }
        Broadcast::RhsRow => {
            let n = b.len();
            (
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % n]))
                    .collect(),
            )
        }
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Reduces an output-shaped gradient back onto an operand of shape `target`.
fn reduce_to(grad: Vec<f64>, target: &Tensor, kind: Broadcast, is_rhs: bool) -> Vec<f64> {
    let operand_is_broadcast = match kind {
        Broadcast::Same => false,
        Broadcast::RhsScalar | Broadcast::RhsRow => is_rhs,
        Broadcast::LhsScalar => !is_rhs,
    };
    if !operand_is_broadcast {
        return grad;
    }
    match kind {
        Broadcast::RhsRow => {
            let n = target.len();
            let mut out = vec![0.0; n];
            for (i, g) in grad.iter().enumerate() {
                out[i % n] += g;
            }
            out
        }
        _ => vec![grad.iter().sum()],
    }
}

/// Shapes `(m, k, n)` and output shape for a matrix product.
fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let mismatch = || ShapeError::Mismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    match (a.rank(), b.rank()) {
        (2, 2) if a.shape()[1] == b.shape()[0] => {
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Ok((m, k, n, vec![m, n]))
        }
        (2, 1) if a.shape()[1] == b.shape()[0] => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            Ok((m, k, 1, vec![m]))
        }
        (1, 2) if a.shape()[0] == b.shape()[0] => {
            let (k, n) = (b.shape()[0], b.shape()[1]);
            Ok((1, k, n, vec![n]))
        }
        _ => Err(mismatch().into()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        let mut tape = self.tape.borrow_mut();
        if tape.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        tape.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: tape.nodes.len() - 1,
        })
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check<'g>(&'g self, v: Var<'g>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn unary<'g>(
        &'g self,
        x: Var<'g>,
        make_op: impl FnOnce(usize) -> Op,
        f: impl Fn(f64) -> Result<f64>,
    ) -> Result<Var<'g>> {
        self.check(x)?;
        let (value, rg) = {
            let tape = self.tape.borrow();
            if tape.consumed {
                return Err(AutodiffError::GraphConsumed);
            }
            let node = &tape.nodes[x.id];
            let data = node
                .value
                .data()
                .iter()
                .map(|&v| f(v))
                .collect::<Result<Vec<f64>>>()?;
            (
                Tensor::new(node.value.shape().to_vec(), data)?,
                node.requires_grad,
            )
        };
        self.push(value, make_op(x.id), rg)
    }

    fn binary<'g>(
        &'g self,
        name: &'static str,
        a: Var<'g>,
        b: Var<'g>,
        make_op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.check(a)?;
        self.check(b)?;
        let (value, rg) = {
            let tape = self.tape.borrow();
            if tape.consumed {
                return Err(AutodiffError::GraphConsumed);
            }
            let (na, nb) = (&tape.nodes[a.id], &tape.nodes[b.id]);
            let kind = broadcast_kind(name, &na.value, &nb.value)?;
            (
                zip_broadcast(&na.value, &nb.value, kind, f),
                na.requires_grad || nb.requires_grad,
            )
        };
        self.push(value, make_op(a.id, b.id), rg)
    }

    fn value_of(&self, id: usize) -> Result<Tensor> {
        let tape = self.tape.borrow();
        if tape.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        Ok(tape.nodes[id].value.clone())
    }

    /// Populates gradients of the scalar `loss` with respect to every
    /// trainable leaf, then frees the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        let mut tape = self.tape.borrow_mut();
        if tape.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let nodes = &tape.nodes;
        if nodes[loss.id].value.len() != 1 {
            return Err(AutodiffError::NotScalar(nodes[loss.id].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(nodes, node, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            let is_param = node.requires_grad && matches!(node.op, Op::Leaf);
            out.push(is_param.then(|| {
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Tensor::new(node.value.shape().to_vec(), data).expect("grad shape")
            }));
        }
        tape.nodes = Vec::new();
        tape.consumed = true;
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    let wants = |id: usize| nodes[id].requires_grad;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let kind = broadcast_kind("add", val(*a), val(*b)).expect("checked");
            if wants(*a) {
                accumulate(grads, *a, reduce_to(g.to_vec(), val(*a), kind, false));
            }
            if wants(*b) {
                let gb: Vec<f64> = g.iter().map(|v| sign * v).collect();
                accumulate(grads, *b, reduce_to(gb, val(*b), kind, true));
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (ta, tb) = (val(*a), val(*b));
            let kind = broadcast_kind("mul", ta, tb).expect("checked");
            let gathered = |t: &Tensor, is_rhs: bool, i: usize| -> f64 {
                let broadcast = match kind {
                    Broadcast::Same => false,
                    Broadcast::RhsScalar | Broadcast::RhsRow => is_rhs,
                    Broadcast::LhsScalar => !is_rhs,
                };
                if !broadcast {
                    t.data()[i]
                } else if kind == Broadcast::RhsRow {
                    t.data()[i % t.len()]
                } else {
                    t.data()[0]
                }
            };
            if wants(*a) {
                let ga: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let y = gathered(tb, true, i);
                        if is_div {
                            g[i] / y
                        } else {
                            g[i] * y
                        }
                    })
                    .collect();
                accumulate(grads, *a, reduce_to(ga, ta, kind, false));
            }
            if wants(*b) {
                let gb: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let x = gathered(ta, false, i);
                        if is_div {
                            let y = gathered(tb, true, i);
                            -g[i] * x / (y * y)
                        } else {
                            g[i] * x
                        }
                    })
                    .collect();
                accumulate(grads, *b, reduce_to(gb, tb, kind, true));
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n, _) = matmul_dims(ta, tb).expect("checked");
            if wants(*a) {
                // dA = G · Bᵀ   (m×n · n×k)
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, tb.data(), true, &mut ga, false);
                accumulate(grads, *a, ga);
            }
            if wants(*b) {
                // dB = Aᵀ · G   (k×m · m×n)
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g, false, &mut gb, false);
                accumulate(grads, *b, gb);
            }
        }
        Op::Sum(a) => {
            accumulate(grads, *a, vec![g[0]; val(*a).len()]);
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::MaxAxis { input, axis, argmax } => {
            let t = val(*input);
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let mut gi = vec![0.0; rows * cols];
            for (j, (&src, gv)) in argmax.iter().zip(g).enumerate() {
                let idx = if *axis == 0 { src * cols + j } else { j * cols + src };
                gi[idx] += gv;
            }
            accumulate(grads, *input, gi);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if wants(p) {
                    accumulate(grads, p, g[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        Op::Tanh(a) => {
            let gi = g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(grads, *a, gi);
        }
        Op::Atanh(a) => {
            let gi = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| {
                    if x.abs() > ATANH_MAX {
                        0.0
                    } else {
                        g / (1.0 - x * x)
                    }
                })
                .collect();
            accumulate(grads, *a, gi);
        }
        Op::AcoshSafe(a) => {
            let gi = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| if x <= 1.0 { 0.0 } else { g / (x * x - 1.0).sqrt() })
                .collect();
            accumulate(grads, *a, gi);
        }
        Op::Sqrt(a) => {
            let gi = g
                .iter()
                .zip(out)
                .map(|(g, y)| 0.5 * g / y.max(MIN_NORM))
                .collect();
            accumulate(grads, *a, gi);
        }
        Op::Square(a) => {
            let gi = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| 2.0 * g * x)
                .collect();
            accumulate(grads, *a, gi);
        }
        Op::Dot(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if wants(*a) {
                accumulate(grads, *a, tb.data().iter().map(|y| g[0] * y).collect());
            }
            if wants(*b) {
                accumulate(grads, *b, ta.data().iter().map(|x| g[0] * x).collect());
            }
        }
        Op::Norm(a) => {
            let n = out[0].max(MIN_NORM);
            let gi = val(*a).data().iter().map(|x| g[0] * x / n).collect();
            accumulate(grads, *a, gi);
        }
        Op::Clamp { input, lo, hi } => {
            let gi = g
                .iter()
                .zip(val(*input).data())
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect();
            accumulate(grads, *input, gi);
        }
        Op::Relu(a) => {
            let gi = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, *a, gi);
        }
        Op::Log(a) => {
            let gi = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            accumulate(grads, *a, gi);
        }
        Op::Exp(a) => {
            let gi = g.iter().zip(out).map(|(g, y)| g * y).collect();
            accumulate(grads, *a, gi);
        }
        Op::Softmax(a) => {
            let gy: f64 = g.iter().zip(out).map(|(g, y)| g * y).sum();
            let gi = g.iter().zip(out).map(|(g, y)| y * (g - gy)).collect();
            accumulate(grads, *a, gi);
        }
        Op::Neg(a) => {
            accumulate(grads, *a, g.iter().map(|v| -v).collect());
        }
        Op::Scale(a, s) => {
            accumulate(grads, *a, g.iter().map(|v| v * s).collect());
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Result<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Result<Vec<usize>> {
        let tape = self.graph.tape.borrow();
        if tape.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        Ok(tape.nodes[self.id].value.shape().to_vec())
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        let t = self.value()?;
        t.item().ok_or_else(|| AutodiffError::NotScalar(t.shape().to_vec()))
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.binary("add", self, rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.binary("sub", self, rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.binary("mul", self, rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.binary("div", self, rhs, Op::Div, |a, b| a / b)
    }

    /// Matrix product; either side may be a vector.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let g = self.graph;
        g.check(self)?;
        g.check(rhs)?;
        let (value, rg) = {
            let tape = g.tape.borrow();
            if tape.consumed {
                return Err(AutodiffError::GraphConsumed);
            }
            let (na, nb) = (&tape.nodes[self.id], &tape.nodes[rhs.id]);
            let (m, k, n, shape) = matmul_dims(&na.value, &nb.value)?;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, na.value.data(), false, nb.value.data(), false, &mut out, false);
            (Tensor::new(shape, out)?, na.requires_grad || nb.requires_grad)
        };
        g.push(value, Op::MatMul(self.id, rhs.id), rg)
    }

    fn reduce(self, make_op: impl FnOnce(usize) -> Op, f: impl Fn(&[f64]) -> f64) -> Result<Var<'g>> {
        let g = self.graph;
        g.check(self)?;
        let (value, rg) = {
            let tape = g.tape.borrow();
            if tape.consumed {
                return Err(AutodiffError::GraphConsumed);
            }
            let node = &tape.nodes[self.id];
            (Tensor::scalar(f(node.value.data())), node.requires_grad)
        };
        g.push(value, make_op(self.id), rg)
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.reduce(Op::Sum, |d| d.iter().sum())
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.reduce(Op::Mean, |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Euclidean norm over all elements.
    pub fn norm(self) -> Result<Var<'g>> {
        self.reduce(Op::Norm, |d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn dot(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let g = self.graph;
        g.check(self)?;
        g.check(rhs)?;
        let (value, rg) = {
            let tape = g.tape.borrow();
            if tape.consumed {
                return Err(AutodiffError::GraphConsumed);
            }
            let (na, nb) = (&tape.nodes[self.id], &tape.nodes[rhs.id]);
            if na.value.shape() != nb.value.shape() {
                return Err(ShapeError::Mismatch {
                    op: "dot",
                    lhs: na.value.shape().to_vec(),
                    rhs: nb.value.shape().to_vec(),
                }
                .into());
            }
            let d: f64 = na
                .value
                .data()
                .iter()
                .zip(nb.value.data())
                .map(|(a, b)| a * b)
                .sum();
            (Tensor::scalar(d), na.requires_grad || nb.requires_grad)
        };
        g.push(value, Op::Dot(self.id, rhs.id), rg)
    }

    /// Maximum of a rank-2 tensor along `axis`; ties go to the lowest index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'g>> {
        let g = self.graph;
        g.check(self)?;
        let (value, argmax, rg) = {
            let tape = g.tape.borrow();
            if tape.consumed {
                return Err(AutodiffError::GraphConsumed);
            }
            let node = &tape.nodes[self.id];
            let t = &node.value;
            if t.rank() != 2 || axis > 1 || t.shape()[axis] == 0 {
                return Err(ShapeError::Rank {
                    op: "max_axis",
                    expected: 2,
                    shape: t.shape().to_vec(),
                }
                .into());
            }
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let d = t.data();
            let (outer, inner) = if axis == 0 { (cols, rows) } else { (rows, cols) };
            let at = |o: usize, i: usize| if axis == 0 { d[i * cols + o] } else { d[o * cols + i] };
            let mut values = Vec::with_capacity(outer);
            let mut argmax = Vec::with_capacity(outer);
            if axis == 0 {
                // Row-major sweep keeps memory access contiguous.
                values.extend_from_slice(&d[..cols]);
                argmax.resize(cols, 0);
                for r in 1..rows {
                    let row = &d[r * cols..(r + 1) * cols];
                    for (j, &v) in row.iter().enumerate() {
                        if v > values[j] {
                            values[j] = v;
                            argmax[j] = r;
                        }
                    }
                }
            } else {
                for o in 0..outer {
                    let mut best = 0;
                    for i in 1..inner {
                        if at(o, i) > at(o, best) {
                            best = i;
                        }
                    }
                    values.push(at(o, best));
                    argmax.push(best);
                }
            }
            (Tensor::vector(values), argmax, node.requires_grad)
        };
        g.push(
            value,
            Op::MaxAxis {
                input: self.id,
                axis,
                argmax,
            },
            rg,
        )
    }

    /// Concatenates along the leading axis.
    pub fn concat(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let Some(first) = parts.first() else {
            return Err(ShapeError::Rank {
                op: "concat",
                expected: 1,
                shape: vec![],
            }
            .into());
        };
        let g = first.graph;
        let (value, rg) = {
            let tape = g.tape.borrow();
            if tape.consumed {
                return Err(AutodiffError::GraphConsumed);
            }
            let head = &tape.nodes[first.id].value;
            let tail_shape = head.shape().get(1..).unwrap_or(&[]).to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            let mut rg = false;
            for p in parts {
                g.check(*p)?;
                let t = &tape.nodes[p.id].value;
                if t.rank() == 0 || t.shape()[1..] != tail_shape[..] {
                    return Err(ShapeError::Mismatch {
                        op: "concat",
                        lhs: head.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    }
                    .into());
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
                rg |= tape.nodes[p.id].requires_grad;
            }
            let mut shape = vec![lead];
            shape.extend(tail_shape);
            (Tensor::new(shape, data)?, rg)
        };
        g.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Tanh, |x| Ok(x.tanh()))
    }

    /// `atanh` with its argument clamped to `[−ATANH_MAX, ATANH_MAX]`.
    ///
    /// Inputs beyond ±1 indicate a point outside the ball and are rejected.
    pub fn atanh(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Atanh, |x| {
            if x.is_nan() || x.abs() > 1.0 {
                Err(AutodiffError::Domain { op: "atanh", value: x })
            } else {
                Ok(x.clamp(-ATANH_MAX, ATANH_MAX).atanh())
            }
        })
    }

    /// `acosh(max(x, 1))`.
    pub fn acosh_safe(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::AcoshSafe, |x| {
            if x.is_nan() {
                Err(AutodiffError::Domain { op: "acosh", value: x })
            } else {
                Ok(x.max(1.0).acosh())
            }
        })
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Sqrt, |x| {
            if x < 0.0 || x.is_nan() {
                Err(AutodiffError::Domain { op: "sqrt", value: x })
            } else {
                Ok(x.sqrt())
            }
        })
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Square, |x| Ok(x * x))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.graph.unary(
            self,
            |input| Op::Clamp { input, lo, hi },
            |x| Ok(x.clamp(lo, hi)),
        )
    }

    pub fn clamp_min(self, lo: f64) -> Result<Var<'g>> {
        self.clamp(lo, f64::INFINITY)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Relu, |x| Ok(x.max(0.0)))
    }

    pub fn log(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Log, |x| {
            if x > 0.0 {
                Ok(x.ln())
            } else {
                Err(AutodiffError::Domain { op: "log", value: x })
            }
        })
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Exp, |x| Ok(x.exp()))
    }

    /// Softmax over all elements of a vector.
    pub fn softmax(self) -> Result<Var<'g>> {
        let g = self.graph;
        g.check(self)?;
        let (value, rg) = {
            let tape = g.tape.borrow();
            if tape.consumed {
                return Err(AutodiffError::GraphConsumed);
            }
            let node = &tape.nodes[self.id];
            let d = node.value.data();
            let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = d.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            (
                Tensor::new(
                    node.value.shape().to_vec(),
                    exps.into_iter().map(|e| e / total).collect(),
                )?,
                node.requires_grad,
            )
        };
        g.push(value, Op::Softmax(self.id), rg)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Neg, |x| Ok(-x))
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.graph.unary(self, |a| Op::Scale(a, s), move |x| Ok(x * s))
    }
}

/// Gradients of trainable leaves, indexed by their variables.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Per-coordinate outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoordStatus {
    Checked { rel_err: f64 },
    /// One-sided slopes disagree; the coordinate sits on a kink.
    KinkSkipped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub status: CoordStatus,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn kinks(&self) -> usize {
        self.coords
            .iter()
            .filter(|c| c.status == CoordStatus::KinkSkipped)
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Magnitude below which errors are measured absolutely.
    pub abs_floor: f64,
    /// Restrict the check to these flat indices.
    pub indices: Option<Vec<usize>>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-5,
            abs_floor: 1e-6,
            indices: None,
        }
    }
}

/// Compares reverse-mode gradients of a scalar `f` at `x` with central
/// finite differences.
pub fn check_gradients<F>(f: F, x: &Tensor, cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(t.clone())?;
        f(&g, v)?.item()
    };
    let analytic = {
        let g = Graph::new();
        let v = g.param(x.clone())?;
        let out = f(&g, v)?;
        let grads = g.backward(out)?;
        grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let f0 = eval(x)?;
    let indices: Vec<usize> = cfg.indices.clone().unwrap_or_else(|| (0..x.len()).collect());
    let mut coords = Vec::with_capacity(indices.len());
    let mut max_rel_err: f64 = 0.0;
    for index in indices {
        let mut plus = x.clone();
        plus.data_mut()[index] += cfg.h;
        let mut minus = x.clone();
        minus.data_mut()[index] -= cfg.h;
        let (fp, fm) = (eval(&plus)?, eval(&minus)?);
        let numeric = (fp - fm) / (2.0 * cfg.h);
        let (fwd, bwd) = ((fp - f0) / cfg.h, (f0 - fm) / cfg.h);
        let a = analytic.data()[index];
        let status = if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()) + 1e-4 {
            CoordStatus::KinkSkipped
        } else {
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            max_rel_err = max_rel_err.max(rel_err);
            CoordStatus::Checked { rel_err }
        };
        coords.push(CoordCheck {
            index,
            analytic: a,
            numeric,
            status,
        });
    }
    Ok(GradCheckReport {
        coords,
        max_rel_err,
        tol: cfg.tol,
    })
}
