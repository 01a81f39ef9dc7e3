use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, Broadcast};
use super::{check_axis, split_at_axis, Result, Tensor, TensorError};

/// Handle of a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divides by the axis extent).
    Var,
}

#[derive(Debug, Clone, Copy)]
enum UnaryOp {
    Relu,
    Neg,
    Square,
    Sqrt,
    Exp,
    Abs,
    Recip,
    Scale(f64),
    AddScalar(f64),
    /// 0.5x² for |x| < 1, |x| − 0.5 otherwise.
    SmoothL1,
}

#[derive(Debug, Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Binary(BinaryOp, NodeId, NodeId, Broadcast),
    Unary(UnaryOp, NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    Reduce {
        op: ReduceOp,
        input: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    Reshape(NodeId),
    Permute {
        input: NodeId,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Unfold {
        input: NodeId,
        axis: usize,
        start: usize,
        size: usize,
        step: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are only ever pushed, so every operand precedes the node using it
/// and the reverse of insertion order is a valid backward schedule. A tape
/// is meant to live for one training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// A tensor value living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiation target.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var { tape: self, id }
    }

    fn record(&self, value: Tensor, op: Op, operands: &[NodeId]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            operands.iter().any(|id| nodes[id.0].requires_grad)
        };
        if requires_grad {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(ax, (a, b))| ax != axis && a != b) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(&shape, data)?;
        Ok(first.tape.record(
            out,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Every leaf created with `requires_grad` ends up with a gradient of its
    /// own shape; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id.0] = Some(vec![1.0]);

        for idx in (0..=loss.id.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; n.value.numel()]);
                let t = Tensor {
                    shape: n.value.shape().to_vec(),
                    data: g,
                };
                (NodeId(i), t)
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

/// Gradients of every differentiable leaf, keyed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves
            .binary_search_by_key(&id, |(k, _)| *k)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    /// Gradient with respect to a differentiable leaf.
    ///
    /// Panics if `var` is not a leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var<'_>) -> &Tensor {
        self.get(var)
            .unwrap_or_else(|| panic!("node {:?} is not a differentiable leaf", var.id))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, contrib: Vec<f64>) {
    if !nodes[id.0].requires_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| -> &Tensor { &nodes[id.0].value };
    let needs = |id: NodeId| nodes[id.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (r, k, c) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(*a) {
                let mut ga = vec![0.0; r * k];
                kernels::gemm(r, c, k, g, false, bv.data(), true, &mut ga, false);
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * c];
                kernels::gemm(k, r, c, av.data(), true, g, false, &mut gb, false);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, r, k, c) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if needs(*a) {
                let mut ga = vec![0.0; n * r * k];
                for i in 0..n {
                    kernels::gemm(
                        r,
                        c,
                        k,
                        &g[i * r * c..],
                        false,
                        &bv.data()[i * k * c..],
                        true,
                        &mut ga[i * r * k..],
                        false,
                    );
                }
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; n * k * c];
                for i in 0..n {
                    kernels::gemm(
                        k,
                        r,
                        c,
                        &av.data()[i * r * k..],
                        true,
                        &g[i * r * c..],
                        false,
                        &mut gb[i * k * c..],
                        false,
                    );
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Binary(op, a, b, plan) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                let ga: Vec<f64> = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * bv[plan.index(i)]).collect(),
                    BinaryOp::Div => g.iter().enumerate().map(|(i, gi)| gi / bv[plan.index(i)]).collect(),
                };
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; bv.len()];
                for (i, gi) in g.iter().enumerate() {
                    let j = plan.index(i);
                    gb[j] += match op {
                        BinaryOp::Add => *gi,
                        BinaryOp::Sub => -gi,
                        BinaryOp::Mul => gi * av[i],
                        BinaryOp::Div => -gi * av[i] / (bv[j] * bv[j]),
                    };
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Unary(op, a) => {
            let x = val(*a).data();
            let y = node.value.data();
            let gx: Vec<f64> = (0..g.len())
                .map(|i| {
                    let gi = g[i];
                    match op {
                        UnaryOp::Relu => {
                            if x[i] > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Neg => -gi,
                        UnaryOp::Square => 2.0 * x[i] * gi,
                        UnaryOp::Sqrt => gi / (2.0 * y[i]),
                        UnaryOp::Exp => gi * y[i],
                        UnaryOp::Abs => {
                            if x[i] > 0.0 {
                                gi
                            } else if x[i] < 0.0 {
                                -gi
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Recip => -gi * y[i] * y[i],
                        UnaryOp::Scale(c) => gi * c,
                        UnaryOp::AddScalar(_) => gi,
                        UnaryOp::SmoothL1 => gi * x[i].clamp(-1.0, 1.0),
                    }
                })
                .collect();
            accumulate(grads, nodes, *a, gx);
        }
        Op::Softmax { input, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = split_at_axis(node.value.shape(), *axis);
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let k = base + j * inner;
                        gx[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *input, gx);
        }
        Op::Reduce { op, input, axis } => {
            let xv = val(*input);
            let x = xv.data();
            let (outer, len, inner) = split_at_axis(xv.shape(), *axis);
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let go = g[o * inner + i];
                    let base = o * len * inner + i;
                    match op {
                        ReduceOp::Sum => (0..len).for_each(|j| gx[base + j * inner] = go),
                        ReduceOp::Mean => (0..len).for_each(|j| gx[base + j * inner] = go / len as f64),
                        ReduceOp::Var => {
                            let mean = (0..len).map(|j| x[base + j * inner]).sum::<f64>() / len as f64;
                            for j in 0..len {
                                let k = base + j * inner;
                                gx[k] = go * 2.0 * (x[k] - mean) / len as f64;
                            }
                        }
                    }
                }
            }
            accumulate(grads, nodes, *input, gx);
        }
        Op::SumAll(a) => {
            let n = val(*a).numel();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Permute { input, axes } => {
            let map = kernels::permute_map(val(*input).shape(), axes);
            let mut gx = vec![0.0; g.len()];
            for (i, &src) in map.iter().enumerate() {
                gx[src] = g[i];
            }
            accumulate(grads, nodes, *input, gx);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for id in inputs {
                let ext = val(*id).shape()[*axis];
                if needs(*id) {
                    let mut gx = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[start..start + ext * inner]);
                    }
                    accumulate(grads, nodes, *id, gx);
                }
                offset += ext;
            }
        }
        Op::Slice { input, axis, start } => {
            let xv = val(*input);
            let (outer, full, inner) = split_at_axis(xv.shape(), *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![0.0; xv.numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, nodes, *input, gx);
        }
        Op::Unfold {
            input,
            axis,
            start,
            size,
            step,
        } => {
            let xv = val(*input);
            let (outer, full, inner) = split_at_axis(xv.shape(), *axis);
            let windows = node.value.shape()[*axis];
            let mut gx = vec![0.0; xv.numel()];
            let mut src = 0;
            for o in 0..outer {
                for w in 0..windows {
                    for j in 0..*size {
                        let row = (o * full + start + w * step + j) * inner;
                        for i in 0..inner {
                            gx[row + i] += g[src];
                            src += 1;
                        }
                    }
                }
            }
            accumulate(grads, nodes, *input, gx);
        }
    }
}

// Arithmetic is fallible (shape checks), so these stay inherent methods
// rather than operator trait impls.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id.0].requires_grad
    }

    /// `[r×k] · [k×c]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; r * c];
        kernels::gemm(r, k, c, a.data(), false, b.data(), false, &mut out, false);
        let out = Tensor::new(&[r, c], out)?;
        Ok(self.tape.record(out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Batched matrix product `[n×r×k] · [n×k×c]`.
    pub fn bmm(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let ok = a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0] && a.shape()[2] == b.shape()[1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (n, r, k, c) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![0.0; n * r * c];
        for i in 0..n {
            kernels::gemm(
                r,
                k,
                c,
                &a.data()[i * r * k..],
                false,
                &b.data()[i * k * c..],
                false,
                &mut out[i * r * c..],
                false,
            );
        }
        let out = Tensor::new(&[n, r, c], out)?;
        Ok(self
            .tape
            .record(out, Op::BatchMatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    fn binary(self, rhs: Var<'t>, op: BinaryOp, name: &'static str) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let plan = Broadcast::plan(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let (ad, bd) = (a.data(), b.data());
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data: Vec<f64> = match &plan {
            Broadcast::Same => ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
            _ => ad.iter().enumerate().map(|(i, x)| f(*x, bd[plan.index(i)])).collect(),
        };
        let out = Tensor::new(a.shape(), data)?;
        Ok(self
            .tape
            .record(out, Op::Binary(op, self.id, rhs.id, plan), &[self.id, rhs.id]))
    }

    /// Elementwise sum. `rhs` may be broadcast into `self` along axes where
    /// its right-aligned extent is 1 or missing.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryOp::Add, "add")
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryOp::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryOp::Mul, "mul")
    }

    /// Division by zero yields non-finite values; check with
    /// [`Tensor::all_finite`].
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinaryOp::Div, "div")
    }

    fn unary(self, op: UnaryOp) -> Var<'t> {
        let a = self.value();
        let data: Vec<f64> = a
            .data()
            .iter()
            .map(|&x| match op {
                UnaryOp::Relu => x.max(0.0),
                UnaryOp::Neg => -x,
                UnaryOp::Square => x * x,
                UnaryOp::Sqrt => x.sqrt(),
                UnaryOp::Exp => x.exp(),
                UnaryOp::Abs => x.abs(),
                UnaryOp::Recip => 1.0 / x,
                UnaryOp::Scale(c) => x * c,
                UnaryOp::AddScalar(c) => x + c,
                UnaryOp::SmoothL1 => {
                    if x.abs() < 1.0 {
                        0.5 * x * x
                    } else {
                        x.abs() - 0.5
                    }
                }
            })
            .collect();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        self.tape.record(out, Op::Unary(op, self.id), &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryOp::Relu)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryOp::Neg)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryOp::Square)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryOp::Exp)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryOp::Abs)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(UnaryOp::Recip)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(UnaryOp::AddScalar(c))
    }

    /// Elementwise smooth-L1 penalty with unit threshold.
    pub fn smooth_l1(self) -> Var<'t> {
        self.unary(UnaryOp::SmoothL1)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("softmax", axis, a.rank())?;
        let (outer, len, inner) = split_at_axis(a.shape(), axis);
        let data = kernels::softmax(a.data(), outer, len, inner);
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.record(out, Op::Softmax { input: self.id, axis }, &[self.id]))
    }

    /// Reduces along `axis`, keeping it with extent 1.
    pub fn reduce(self, op: ReduceOp, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("reduce", axis, a.rank())?;
        let (outer, len, inner) = split_at_axis(a.shape(), axis);
        let x = a.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let sum: f64 = (0..len).map(|j| x[base + j * inner]).sum();
                data[o * inner + i] = match op {
                    ReduceOp::Sum => sum,
                    ReduceOp::Mean => sum / len as f64,
                    ReduceOp::Var => {
                        let mean = sum / len as f64;
                        (0..len).map(|j| (x[base + j * inner] - mean).powi(2)).sum::<f64>() / len as f64
                    }
                };
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.record(
            out,
            Op::Reduce {
                op,
                input: self.id,
                axis,
            },
            &[self.id],
        ))
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Sum, axis)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Mean, axis)
    }

    pub fn var(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Var, axis)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t> {
        let total: f64 = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(total), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let numel: usize = shape.iter().product();
        if numel != a.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: a.data().to_vec(),
        };
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let mut seen = vec![false; a.rank()];
        let valid = axes.len() == a.rank()
            && axes
                .iter()
                .all(|&ax| ax < a.rank() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of the axes of {:?}", a.shape()),
            });
        }
        let map = kernels::permute_map(a.shape(), axes);
        let data: Vec<f64> = map.iter().map(|&i| a.data()[i]).collect();
        let shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
        let out = Tensor { shape, data };
        Ok(self.tape.record(
            out,
            Op::Permute {
                input: self.id,
                axes: axes.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                reason: format!("rank {rank} < 2"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("slice", axis, a.rank())?;
        if len == 0 || start + len > a.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                reason: format!("range {start}..{} exceeds extent {}", start + len, a.shape()[axis]),
            });
        }
        let (outer, full, inner) = split_at_axis(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * full + start) * inner;
            data.extend_from_slice(&a.data()[src..src + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let out = Tensor { shape, data };
        Ok(self.tape.record(
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// Sliding windows along `axis`: window `k` covers
    /// `start + k·step .. start + k·step + size`. The axis is replaced by
    /// `[windows, size]`, so `[B, L, C]` unfolded on axis 1 is `[B, n, size, C]`.
    pub fn unfold(self, axis: usize, start: usize, size: usize, step: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("unfold", axis, a.rank())?;
        let full = a.shape()[axis];
        if size == 0 || step == 0 || start + size > full {
            return Err(TensorError::Invalid {
                op: "unfold",
                reason: format!("window {size} at offset {start} (step {step}) does not fit extent {full}"),
            });
        }
        let windows = (full - start - size) / step + 1;
        let (outer, _, inner) = split_at_axis(a.shape(), axis);
        let x = a.data();
        let mut data = Vec::with_capacity(outer * windows * size * inner);
        for o in 0..outer {
            for w in 0..windows {
                let row = (o * full + start + w * step) * inner;
                data.extend_from_slice(&x[row..row + size * inner]);
            }
        }
        let mut shape = a.shape()[..axis].to_vec();
        shape.push(windows);
        shape.push(size);
        shape.extend_from_slice(&a.shape()[axis + 1..]);
        let out = Tensor { shape, data };
        Ok(self.tape.record(
            out,
            Op::Unfold {
                input: self.id,
                axis,
                start,
                size,
                step,
            },
            &[self.id],
        ))
    }
}
