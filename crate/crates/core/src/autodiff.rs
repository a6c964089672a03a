//! Tape-based reverse-mode automatic differentiation.
//!
//! Every call on a [`Graph`] evaluates its forward value immediately and
//! appends a node to the tape. Nodes only ever reference earlier nodes, so the
//! tape order is a topological order and [`Graph::backprop`] is a single
//! reverse sweep.
//!
//! Two nodes exist purely to shape gradients: [`Op::StopGradient`] forwards its
//! input unchanged and blocks the backward signal, and [`Op::GradScale`]
//! forwards unchanged and multiplies the backward signal by a constant.
//!
//! Binary elementwise ops broadcast by trailing-axis alignment only: one
//! operand's shape must equal a suffix of the other's. Anything else goes
//! through an explicit [`Op::Broadcast`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sum of `|x|` below which a SWAP unit is treated as all-zero.
pub const SWAP_DEGENERATE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Constant or trainable parameter.
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
    Relu,
    Relu6,
    Sigmoid,
    /// `max(x, floor)`; gradient passes where `x >= floor`.
    ClampMin(f64),
    /// Multiplication by a constant.
    Scale(f64),
    /// Softmax over the last axis.
    Softmax,
    /// Sum over one axis, or over everything when `None`.
    Sum(Option<usize>),
    Mean(Option<usize>),
    /// Expand to the target shape (trailing-aligned, size-1 axes stretch).
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Self-weighted average pooling of consecutive row segments of a
    /// `[frames, features]` input; the payload lists each segment's length.
    SwapPool(Vec<usize>),
    StopGradient,
    GradScale(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Relu6 => "relu6",
            Op::Sigmoid => "sigmoid",
            Op::ClampMin(_) => "clamp_min",
            Op::Scale(_) => "scale",
            Op::Softmax => "softmax",
            Op::Sum(_) => "reduce_sum",
            Op::Mean(_) => "reduce_mean",
            Op::Broadcast(_) => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::SwapPool(_) => "swap_pool",
            Op::StopGradient => "stop_gradient",
            Op::GradScale(_) => "gradient_scale",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div => Some(2),
            Op::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable node of a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, param: NodeId) -> Option<&Tensor> {
        self.grads.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn bits_eq(&self, other: &GradientMap) -> bool {
        self.grads.len() == other.grads.len()
            && self
                .grads
                .iter()
                .zip(&other.grads)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bits_eq(vb))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    pub fn params(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends `op` applied to `inputs`, evaluating it eagerly.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op == Op::Leaf {
            return Err(Error::invalid("leaves are created with constant() or param()"));
        }
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} takes {n} inputs, got {}",
                    op.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::invalid(format!("{} needs at least one input", op.name())));
        }
        for &id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(id));
            }
        }
        if let Op::GradScale(f) = op {
            if !f.is_finite() {
                return Err(Error::invalid("gradient scale factor must be finite"));
            }
        }
        let value = {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            forward(&op, &ins)?
        };
        Ok(self.push(op, inputs.to_vec(), value, false))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[x])
    }
    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[x])
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }
    pub fn relu6(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu6, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.apply(Op::ClampMin(floor), &[x])
    }
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale(factor), &[x])
    }
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(None), &[x])
    }
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::Sum(Some(axis)), &[x])
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean(None), &[x])
    }
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::Mean(Some(axis)), &[x])
    }
    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Broadcast(shape.to_vec()), &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat(axis), xs)
    }
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }
    pub fn swap_pool(&mut self, frames: NodeId, segments: &[usize]) -> Result<NodeId> {
        self.apply(Op::SwapPool(segments.to_vec()), &[frames])
    }
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::StopGradient, &[x])
    }
    pub fn gradient_scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::GradScale(factor), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Every trainable node gets an entry,
    /// zero-filled when the loss does not depend on it.
    pub fn backprop(&self, loss: NodeId) -> Result<GradientMap> {
        let root = self.nodes.get(loss.0).ok_or(Error::UnknownNode(loss))?;
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient {
                    node: NodeId(i),
                    op: node.op.name(),
                });
            }
            let upstream = match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::StopGradient => continue,
                Op::GradScale(f) => vec![Some(g.iter().map(|v| v * f).collect())],
                _ => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j.0].value).collect();
                    backward(&node.op, &ins, &node.value, &g)
                }
            };
            for (&input, contribution) in node.inputs.iter().zip(upstream) {
                let Some(c) = contribution else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().filter(|(_, n)| n.trainable) {
            let shape = node.value.shape().to_vec();
            let data = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient {
                    node: NodeId(i),
                    op: "leaf",
                });
            }
            out.insert(NodeId(i), Tensor::from_parts(shape, data));
        }
        Ok(GradientMap { grads: out })
    }

    /// Re-evaluates the tape with some leaves replaced.
    ///
    /// Gradient-shaping nodes are replayed as `y0 + f·(x − x0)` around their
    /// recorded values (`f = 0` for a stop-gradient), so the replayed function
    /// has exactly the derivatives that [`Graph::backprop`] reports.
    pub fn replay(&self, overrides: &HashMap<NodeId, Tensor>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => match overrides.get(&NodeId(i)) {
                    Some(t) if t.shape() == node.value.shape() => t.clone(),
                    Some(t) => return Err(Error::shape("replay", node.value.shape(), t.shape())),
                    None => node.value.clone(),
                },
                Op::StopGradient | Op::GradScale(_) => {
                    let f = match node.op {
                        Op::GradScale(f) => f,
                        _ => 0.0,
                    };
                    let input = node.inputs[0].0;
                    let (x, x0) = (&values[input], &self.nodes[input].value);
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(x0.data()))
                        .map(|(y0, (x, x0))| y0 + f * (x - x0))
                        .collect();
                    Tensor::from_parts(node.value.shape().to_vec(), data)
                }
                op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &values[j.0]).collect();
                    forward(op, &ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }
}

fn finite(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(Tensor::from_parts(shape, data))
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Output shape of a trailing-aligned binary op.
fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if is_suffix(b, a) {
        Ok(a.to_vec())
    } else if is_suffix(a, b) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = binary_shape(op, a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
    finite(op, shape, data)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Domain {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

/// For each output element of a broadcast, the index of its source element.
fn broadcast_map(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() > to.len() {
        return Err(Error::shape("broadcast", from, to));
    }
    let offset = to.len() - from.len();
    let mut strides = vec![0usize; to.len()];
    let mut stride = 1;
    for k in (0..from.len()).rev() {
        let (f, t) = (from[k], to[k + offset]);
        if f == t {
            strides[k + offset] = stride;
        } else if f != 1 {
            return Err(Error::shape("broadcast", from, to));
        }
        stride *= f;
    }
    let n: usize = to.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for k in (0..to.len()).rev() {
            idx[k] += 1;
            if idx[k] < to[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(map)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary(op: &'static str, x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    finite(op, x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn forward(op: &Op, ins: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            finite(name, vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        Op::Add => binary(name, ins[0], ins[1], |a, b| a + b),
        Op::Sub => binary(name, ins[0], ins[1], |a, b| a - b),
        Op::Mul => binary(name, ins[0], ins[1], |a, b| a * b),
        Op::Div => {
            if ins[1].data().contains(&0.0) {
                return Err(Error::Domain {
                    op: name,
                    msg: "division by zero".into(),
                });
            }
            binary(name, ins[0], ins[1], |a, b| a / b)
        }
        Op::Abs => unary(name, ins[0], f64::abs),
        Op::Square => unary(name, ins[0], |v| v * v),
        Op::Sqrt => {
            if ins[0].data().iter().any(|&v| v < 0.0) {
                return Err(Error::Domain {
                    op: name,
                    msg: "square root of a negative value".into(),
                });
            }
            unary(name, ins[0], f64::sqrt)
        }
        Op::Exp => unary(name, ins[0], f64::exp),
        Op::Log => {
            if ins[0].data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: name,
                    msg: "logarithm of a non-positive value".into(),
                });
            }
            unary(name, ins[0], f64::ln)
        }
        Op::Relu => unary(name, ins[0], |v| v.max(0.0)),
        Op::Relu6 => unary(name, ins[0], |v| v.clamp(0.0, 6.0)),
        Op::Sigmoid => unary(name, ins[0], sigmoid),
        Op::ClampMin(floor) => unary(name, ins[0], |v| v.max(*floor)),
        Op::Scale(c) => unary(name, ins[0], |v| v * c),
        Op::Softmax => {
            let x = ins[0];
            let width = *x.shape().last().ok_or(Error::Domain {
                op: name,
                msg: "softmax needs at least one axis".into(),
            })?;
            let mut data = x.data().to_vec();
            if width > 0 {
                for row in data.chunks_mut(width) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= total);
                }
            }
            finite(name, x.shape().to_vec(), data)
        }
        Op::Sum(axis) | Op::Mean(axis) => {
            let x = ins[0];
            let mean = matches!(op, Op::Mean(_));
            match axis {
                None => {
                    let n = x.len().max(1) as f64;
                    let s = x.sum();
                    finite(name, vec![], vec![if mean { s / n } else { s }])
                }
                Some(axis) => {
                    check_axis(name, x.shape(), *axis)?;
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    if mean && len > 0 {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*axis);
                    finite(name, shape, out)
                }
            }
        }
        Op::Broadcast(to) => {
            let map = broadcast_map(ins[0].shape(), to)?;
            let src = ins[0].data();
            Ok(Tensor::from_parts(to.clone(), map.iter().map(|&j| src[j]).collect()))
        }
        Op::Reshape(to) => ins[0].reshape(to),
        Op::Concat(axis) => {
            let first = ins[0].shape();
            check_axis(name, first, *axis)?;
            for t in &ins[1..] {
                let s = t.shape();
                let compatible =
                    s.len() == first.len() && s.iter().zip(first).enumerate().all(|(k, (a, b))| k == *axis || a == b);
                if !compatible {
                    return Err(Error::shape(name, first, s));
                }
            }
            let (outer, _, inner) = axis_split(first, *axis);
            let mut data = Vec::with_capacity(ins.iter().map(|t| t.len()).sum());
            for o in 0..outer {
                for t in ins {
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = ins.iter().map(|t| t.shape()[*axis]).sum();
            Ok(Tensor::from_parts(shape, data))
        }
        Op::Slice { axis, start, end } => {
            let x = ins[0];
            check_axis(name, x.shape(), *axis)?;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            if start >= end || *end > len {
                return Err(Error::Domain {
                    op: name,
                    msg: format!("range {start}..{end} invalid for axis of length {len}"),
                });
            }
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Ok(Tensor::from_parts(shape, data))
        }
        Op::SwapPool(segments) => {
            let x = ins[0];
            let total: usize = segments.iter().sum();
            if x.rank() != 2 || x.shape()[0] != total {
                return Err(Error::shape(name, x.shape(), &[total]));
            }
            if segments.contains(&0) {
                return Err(Error::Domain {
                    op: name,
                    msg: "every segment needs at least one frame".into(),
                });
            }
            let width = x.shape()[1];
            let mut out = Vec::with_capacity(segments.len() * width);
            let mut row = 0;
            for &len in segments {
                for u in 0..width {
                    let (mut num, mut den) = (0.0, 0.0);
                    for r in row..row + len {
                        let v = x.data()[r * width + u];
                        num += v.abs() * v;
                        den += v.abs();
                    }
                    out.push(if den < SWAP_DEGENERATE { 0.0 } else { num / den });
                }
                row += len;
            }
            finite(name, vec![segments.len(), width], out)
        }
        Op::StopGradient | Op::GradScale(_) => Ok(ins[0].clone()),
    }
}

/// Vector-Jacobian products for every input of one node.
fn backward(op: &Op, ins: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let elementwise = |x: &Tensor, d: &dyn Fn(f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some(
            x.data()
                .iter()
                .zip(out.data())
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * d(xv, yv))
                .collect(),
        )]
    };
    match op {
        Op::Leaf | Op::StopGradient | Op::GradScale(_) => unreachable!("handled by backprop"),
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = matmul_raw(g, &transpose(b.data(), k, n), m, n, k);
            let gb = matmul_raw(&transpose(a.data(), m, k), g, k, m, n);
            vec![Some(ga), Some(gb)]
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (ins[0], ins[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for (i, &gv) in g.iter().enumerate() {
                let (ia, ib) = (i % ad.len(), i % bd.len());
                let (x, y) = (ad[ia], bd[ib]);
                let (da, db) = match op {
                    Op::Add => (1.0, 1.0),
                    Op::Sub => (1.0, -1.0),
                    Op::Mul => (y, x),
                    _ => (1.0 / y, -x / (y * y)),
                };
                ga[ia] += gv * da;
                gb[ib] += gv * db;
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Abs => elementwise(ins[0], &|x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Square => elementwise(ins[0], &|x, _| 2.0 * x),
        Op::Sqrt => elementwise(ins[0], &|_, y| 0.5 / y),
        Op::Exp => elementwise(ins[0], &|_, y| y),
        Op::Log => elementwise(ins[0], &|x, _| 1.0 / x),
        Op::Relu => elementwise(ins[0], &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Relu6 => elementwise(ins[0], &|x, _| if x > 0.0 && x < 6.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid => elementwise(ins[0], &|_, y| y * (1.0 - y)),
        Op::ClampMin(floor) => elementwise(ins[0], &|x, _| if x >= *floor { 1.0 } else { 0.0 }),
        Op::Scale(c) => elementwise(ins[0], &|_, _| *c),
        Op::Softmax => {
            let width = *out.shape().last().unwrap_or(&1);
            let mut gi = vec![0.0; g.len()];
            if width > 0 {
                for ((dst, y), gv) in gi.chunks_mut(width).zip(out.data().chunks(width)).zip(g.chunks(width)) {
                    let dot: f64 = y.iter().zip(gv).map(|(a, b)| a * b).sum();
                    for ((d, &yk), &gk) in dst.iter_mut().zip(y).zip(gv) {
                        *d = yk * (gk - dot);
                    }
                }
            }
            vec![Some(gi)]
        }
        Op::Sum(axis) | Op::Mean(axis) => {
            let x = ins[0];
            let mean = matches!(op, Op::Mean(_));
            match axis {
                None => {
                    let scale = if mean { 1.0 / x.len().max(1) as f64 } else { 1.0 };
                    vec![Some(vec![g[0] * scale; x.len()])]
                }
                Some(axis) => {
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let scale = if mean && len > 0 { 1.0 / len as f64 } else { 1.0 };
                    let mut gi = vec![0.0; x.len()];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gi[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = s * scale;
                            }
                        }
                    }
                    vec![Some(gi)]
                }
            }
        }
        Op::Broadcast(to) => {
            let map = broadcast_map(ins[0].shape(), to).expect("validated in forward");
            let mut gi = vec![0.0; ins[0].len()];
            for (&src, gv) in map.iter().zip(g) {
                gi[src] += gv;
            }
            vec![Some(gi)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Concat(axis) => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut grads: Vec<Vec<f64>> = ins.iter().map(|t| Vec::with_capacity(t.len())).collect();
            for o in 0..outer {
                let mut offset = o * total;
                for (t, gi) in ins.iter().zip(grads.iter_mut()) {
                    let chunk = t.shape()[*axis] * inner;
                    gi.extend_from_slice(&g[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            grads.into_iter().map(Some).collect()
        }
        Op::Slice { axis, start, end } => {
            let x = ins[0];
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut gi = vec![0.0; x.len()];
            for o in 0..outer {
                gi[(o * len + start) * inner..(o * len + end) * inner].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(gi)]
        }
        Op::SwapPool(segments) => {
            let x = ins[0];
            let width = x.shape()[1];
            let mut gi = vec![0.0; x.len()];
            let mut row = 0;
            for (s, &len) in segments.iter().enumerate() {
                for u in 0..width {
                    let den: f64 = (row..row + len).map(|r| x.data()[r * width + u].abs()).sum();
                    if den < SWAP_DEGENERATE {
                        continue;
                    }
                    let pooled = out.data()[s * width + u];
                    let gv = g[s * width + u];
                    for r in row..row + len {
                        let v = x.data()[r * width + u];
                        let sign = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gi[r * width + u] = gv * (2.0 * v.abs() - sign * pooled) / den;
                    }
                }
                row += len;
            }
            vec![Some(gi)]
        }
    }
}
