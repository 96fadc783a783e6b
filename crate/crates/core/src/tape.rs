//! Reverse-mode differentiation over a recorded tape of primitive applications.
//!
//! Every node holds its forward value. Leaves are either named parameters
//! (which receive gradients) or constants. `backprop` walks the tape from the
//! loss node backwards, accumulating vector-Jacobian products.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive, together with any non-tensor arguments it needs.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[r,k] x [k,c] -> [r,c]`
    MatMul,
    /// `[r,k] x [c,k]^T -> [r,c]`; weights are stored `[out, in]`.
    MatMulTransB,
    /// Elementwise sum; the second input broadcasts into the first one's shape.
    Add,
    /// Elementwise product with the same broadcasting rule as `Add`.
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
    /// Softmax over the last axis where `false` positions get exactly zero weight.
    MaskedSoftmax {
        mask: Vec<bool>,
    },
    /// Concatenation along the last axis.
    Concat,
    /// Columns `start..end` of the last axis.
    Slice {
        start: usize,
        end: usize,
    },
    /// Same-length convolution of every row of the first input with the
    /// odd-length filter given as second input, zero padded on both sides.
    ConvSame,
    /// Gathers columns `ids` of an `[n, V]` table into rows of an `[ids.len(), n]` result.
    Embedding {
        ids: Vec<usize>,
    },
    /// Multiplies by a precomputed mask (entries 0 or 1/(1-rate)).
    Dropout {
        mask: Vec<f64>,
    },
    /// Sum of all entries, as a scalar.
    Sum,
    Reshape {
        shape: Vec<usize>,
    },
    /// Stacks `[B,d]` inputs into `[B, count, d]`.
    Stack,
    /// `weights [B,A]`, `values [B,A,d]` -> `[B,d]`, row-wise weighted sums.
    WeightedSum,
    /// Row `b` of the result is row `b` of the first input when `keep_new[b]`,
    /// else row `b` of the second input.
    RowSelect {
        keep_new: Vec<bool>,
    },
    /// `Σ_b weights[b] · (−ln softmax(logits_b)[targets[b]])` as a scalar.
    CrossEntropy {
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulTransB => "matmul_t",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::MaskedSoftmax { .. } => "masked_softmax",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::ConvSame => "conv_same",
            Primitive::Embedding { .. } => "embedding",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Sum => "sum",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Stack => "stack",
            Primitive::WeightedSum => "weighted_sum",
            Primitive::RowSelect { .. } => "row_select",
            Primitive::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// Parses argument-free primitives by name.
impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "matmul_t" => Primitive::MatMulTransB,
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "tanh" => Primitive::Tanh,
            "sigmoid" => Primitive::Sigmoid,
            "softmax" => Primitive::Softmax,
            "concat" => Primitive::Concat,
            "conv_same" => Primitive::ConvSame,
            "sum" => Primitive::Sum,
            "stack" => Primitive::Stack,
            "weighted_sum" => Primitive::WeightedSum,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Parameter(String),
    Constant,
    Op(Primitive, Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
}

/// Single-writer record of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Adds a named leaf that receives a gradient in [`Tape::backprop`].
    pub fn parameter(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(value, Origin::Parameter(name.to_string()), true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Origin::Constant, false)
    }

    fn push(&mut self, value: Tensor, origin: Origin, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            origin,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    /// Evaluates `prim` on the given nodes and records the application.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let mut values = Vec::with_capacity(inputs.len());
        let mut requires_grad = false;
        for &id in inputs {
            let node = self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))?;
            requires_grad |= node.requires_grad;
            values.push(&node.value);
        }
        let out = forward(&prim, &values)?;
        Ok(self.push(out, Origin::Op(prim, inputs.to_vec()), requires_grad))
    }

    /// Recomputes every op node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.origin {
                Origin::Op(prim, inputs) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|i| &values[i.0]).collect();
                    forward(prim, &ins)?
                }
                _ => node.value.clone(),
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    /// Parameters that do not influence `loss` get zero tensors.
    pub fn backprop(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.node_gradients(loss)?;
        let mut out = BTreeMap::new();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let Origin::Parameter(name) = &node.origin {
                let g = match grad {
                    Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g),
                    None => Tensor::zeros(node.value.shape()),
                };
                match out.get_mut(name) {
                    None => {
                        out.insert(name.clone(), g);
                    }
                    // The same parameter bound twice: gradients add up.
                    Some(existing) => {
                        let existing: &mut Tensor = existing;
                        for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn node_gradients(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        let root = self.nodes.get(loss.0).ok_or(Error::UnknownNode(loss.0))?;
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if let Origin::Op(prim, inputs) = &node.origin {
                let ins: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                for (j, &input) in inputs.iter().enumerate() {
                    let src = &self.nodes[input.0];
                    if !src.requires_grad {
                        continue;
                    }
                    let acc = grads[input.0].get_or_insert_with(|| vec![0.0; src.value.len()]);
                    backward(prim, j, &ins, &node.value, &g, acc);
                }
            }
            grads[k] = Some(g);
        }
        Ok(grads)
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn matmul_t(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMulTransB, &[a, w])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(factor), &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn masked_softmax(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        self.apply(Primitive::MaskedSoftmax { mask }, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { start, end }, &[a])
    }
    pub fn conv_same(&mut self, signal: NodeId, filter: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ConvSame, &[signal, filter])
    }
    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::Embedding { ids }, &[table])
    }
    pub fn dropout(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        self.apply(Primitive::Dropout { mask }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::Stack, rows)
    }
    pub fn weighted_sum(&mut self, weights: NodeId, values: NodeId) -> Result<NodeId> {
        self.apply(Primitive::WeightedSum, &[weights, values])
    }
    pub fn row_select(&mut self, new: NodeId, old: NodeId, keep_new: Vec<bool>) -> Result<NodeId> {
        self.apply(Primitive::RowSelect { keep_new }, &[new, old])
    }
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<NodeId> {
        self.apply(Primitive::CrossEntropy { targets, weights }, &[logits])
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, reason: &str) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.to_string(),
    }
}

fn expect_arity(prim: &Primitive, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::InvalidArgument {
            op: prim.name(),
            reason: alloc::format!("expects {n} inputs, got {}", inputs.len()),
        });
    }
    Ok(())
}

/// `c = a · b (+ beta · c)` on row-major buffers, with either operand
/// optionally read transposed. `a` is logically `[m,k]`, `b` is `[k,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the buffers hold at least m·k, k·n and m·n values and the strides
    // describe row-major (or transposed row-major) layouts inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index of the broadcast operand for every element of the full-shape operand.
enum Broadcast {
    Same,
    /// Operand repeats with this period (it is a suffix of the full shape).
    Cycle(usize),
    Map(Vec<usize>),
}

fn broadcast_plan(full: &[usize], part: &[usize], op: &'static str) -> Result<Broadcast> {
    if part.len() > full.len() {
        return Err(mismatch(op, full, part));
    }
    let offset = full.len() - part.len();
    for (i, &d) in part.iter().enumerate() {
        if d != 1 && d != full[offset + i] {
            return Err(mismatch(op, full, part));
        }
    }
    let total: usize = full.iter().product();
    let part_len: usize = part.iter().product();
    if part_len == total {
        return Ok(Broadcast::Same);
    }
    let stripped: &[usize] = {
        let lead = part.iter().take_while(|&&d| d == 1).count();
        &part[lead..]
    };
    if full.ends_with(stripped) {
        return Ok(Broadcast::Cycle(part_len.max(1)));
    }
    // General case: strides of `part` aligned to `full`, zero on broadcast axes.
    let mut strides = vec![0usize; full.len()];
    let mut s = 1;
    for i in (0..part.len()).rev() {
        if part[i] != 1 {
            strides[offset + i] = s;
        }
        s *= part[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; full.len()];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for axis in (0..full.len()).rev() {
            idx[axis] += 1;
            pos += strides[axis];
            if idx[axis] < full[axis] {
                break;
            }
            pos -= strides[axis] * full[axis];
            idx[axis] = 0;
        }
    }
    Ok(Broadcast::Map(map))
}

fn broadcast_zip(x: &[f64], y: &[f64], plan: &Broadcast, mut f: impl FnMut(f64, f64) -> f64) -> Vec<f64> {
    match plan {
        Broadcast::Same => x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect(),
        Broadcast::Cycle(p) => {
            let mut out = Vec::with_capacity(x.len());
            for chunk in x.chunks(*p) {
                out.extend(chunk.iter().zip(y).map(|(&a, &b)| f(a, b)));
            }
            out
        }
        Broadcast::Map(map) => x.iter().zip(map).map(|(&a, &j)| f(a, y[j])).collect(),
    }
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && v.is_nan() {
            out.fill(f64::NAN);
            return Ok(());
        }
        if allowed(i) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut total = 0.0;
    for (i, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if allowed(i) { libm::exp(v - max) } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let op = prim.name();
    match prim {
        Primitive::MatMul | Primitive::MatMulTransB => {
            expect_arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let (r, k) = (a.shape()[0], a.shape()[1]);
            let trans = matches!(prim, Primitive::MatMulTransB);
            let (bk, c) = if trans {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if k != bk {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let mut out = vec![0.0; r * c];
            gemm(r, k, c, a.data(), false, b.data(), trans, &mut out, 0.0);
            Ok(Tensor::from_parts(vec![r, c], out))
        }
        Primitive::Add | Primitive::Mul => {
            expect_arity(prim, inputs, 2)?;
            let (x, y) = (inputs[0], inputs[1]);
            let plan = broadcast_plan(x.shape(), y.shape(), op)?;
            let data = if matches!(prim, Primitive::Add) {
                broadcast_zip(x.data(), y.data(), &plan, |a, b| a + b)
            } else {
                broadcast_zip(x.data(), y.data(), &plan, |a, b| a * b)
            };
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Primitive::Scale(c) => {
            expect_arity(prim, inputs, 1)?;
            let x = inputs[0];
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * c).collect(),
            ))
        }
        Primitive::Tanh | Primitive::Sigmoid => {
            expect_arity(prim, inputs, 1)?;
            let x = inputs[0];
            let f: fn(f64) -> f64 = if matches!(prim, Primitive::Tanh) {
                libm::tanh
            } else {
                sigmoid
            };
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|&v| f(v)).collect(),
            ))
        }
        Primitive::Softmax | Primitive::MaskedSoftmax { .. } => {
            expect_arity(prim, inputs, 1)?;
            let x = inputs[0];
            let mask = match prim {
                Primitive::MaskedSoftmax { mask } => {
                    if mask.len() != x.len() {
                        return Err(mismatch(op, x.shape(), &[mask.len()]));
                    }
                    Some(mask.as_slice())
                }
                _ => None,
            };
            if x.rank() == 0 {
                return Err(invalid(op, "needs at least one axis"));
            }
            let cols = x.last_dim();
            let mut out = vec![0.0; x.len()];
            if cols > 0 {
                for (r, o) in out.chunks_mut(cols).enumerate() {
                    let m = mask.map(|m| &m[r * cols..(r + 1) * cols]);
                    softmax_row(x.row(r), m, o)?;
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Primitive::Concat => {
            let first = inputs.first().ok_or_else(|| invalid(op, "no inputs"))?;
            let lead = &first.shape()[..first.rank().saturating_sub(1)];
            let rows = first.rows();
            let mut total = 0;
            for t in inputs {
                if t.rank() != first.rank() || &t.shape()[..t.rank() - 1] != lead {
                    return Err(mismatch(op, first.shape(), t.shape()));
                }
                total += t.last_dim();
            }
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in inputs {
                    out.extend_from_slice(t.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Ok(Tensor::from_parts(shape, out))
        }
        Primitive::Slice { start, end } => {
            expect_arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.rank() == 0 || start >= end || *end > x.last_dim() {
                return Err(invalid(
                    op,
                    &alloc::format!("range {start}..{end} invalid for shape {:?}", x.shape()),
                ));
            }
            let mut out = Vec::with_capacity(x.rows() * (end - start));
            for r in 0..x.rows() {
                out.extend_from_slice(&x.row(r)[*start..*end]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = end - start;
            Ok(Tensor::from_parts(shape, out))
        }
        Primitive::ConvSame => {
            expect_arity(prim, inputs, 2)?;
            let (s, f) = (inputs[0], inputs[1]);
            if f.rank() != 1 || f.len() % 2 == 0 || s.rank() == 0 {
                return Err(mismatch(op, s.shape(), f.shape()));
            }
            let len = s.last_dim();
            let mut out = vec![0.0; s.len()];
            if len > 0 {
                for (r, o) in out.chunks_mut(len).enumerate() {
                    conv_row(s.row(r), f.data(), o);
                }
            }
            Ok(Tensor::from_parts(s.shape().to_vec(), out))
        }
        Primitive::Embedding { ids } => {
            expect_arity(prim, inputs, 1)?;
            let table = inputs[0];
            if table.rank() != 2 {
                return Err(invalid(op, "table must be [dim, vocab]"));
            }
            let (dim, vocab) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::TokenOutOfRange { id, size: vocab });
                }
                out.extend((0..dim).map(|d| table.data()[d * vocab + id]));
            }
            Ok(Tensor::from_parts(vec![ids.len(), dim], out))
        }
        Primitive::Dropout { mask } => {
            expect_arity(prim, inputs, 1)?;
            let x = inputs[0];
            if mask.len() != x.len() {
                return Err(mismatch(op, x.shape(), &[mask.len()]));
            }
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
            ))
        }
        Primitive::Sum => {
            expect_arity(prim, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Primitive::Reshape { shape } => {
            expect_arity(prim, inputs, 1)?;
            inputs[0].reshape(shape)
        }
        Primitive::Stack => {
            let first = inputs.first().ok_or_else(|| invalid(op, "no inputs"))?;
            if first.rank() != 2 {
                return Err(invalid(op, "inputs must be [batch, dim]"));
            }
            let (b, d) = (first.shape()[0], first.shape()[1]);
            for t in inputs {
                if t.shape() != first.shape() {
                    return Err(mismatch(op, first.shape(), t.shape()));
                }
            }
            let count = inputs.len();
            let mut out = vec![0.0; b * count * d];
            for (t, x) in inputs.iter().enumerate() {
                for r in 0..b {
                    out[(r * count + t) * d..(r * count + t + 1) * d].copy_from_slice(x.row(r));
                }
            }
            Ok(Tensor::from_parts(vec![b, count, d], out))
        }
        Primitive::WeightedSum => {
            expect_arity(prim, inputs, 2)?;
            let (w, v) = (inputs[0], inputs[1]);
            if w.rank() != 2 || v.rank() != 3 || v.shape()[..2] != w.shape()[..] {
                return Err(mismatch(op, w.shape(), v.shape()));
            }
            let (b, a, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            let mut out = vec![0.0; b * d];
            for r in 0..b {
                let o = &mut out[r * d..(r + 1) * d];
                for i in 0..a {
                    let wi = w.data()[r * a + i];
                    let vals = &v.data()[(r * a + i) * d..(r * a + i + 1) * d];
                    for (acc, x) in o.iter_mut().zip(vals) {
                        *acc += wi * x;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![b, d], out))
        }
        Primitive::RowSelect { keep_new } => {
            expect_arity(prim, inputs, 2)?;
            let (new, old) = (inputs[0], inputs[1]);
            if new.shape() != old.shape() || new.rank() == 0 || new.shape()[0] != keep_new.len() {
                return Err(mismatch(op, new.shape(), old.shape()));
            }
            let stride = new.len() / keep_new.len().max(1);
            let mut out = Vec::with_capacity(new.len());
            for (r, &k) in keep_new.iter().enumerate() {
                let src = if k { new } else { old };
                out.extend_from_slice(&src.data()[r * stride..(r + 1) * stride]);
            }
            Ok(Tensor::from_parts(new.shape().to_vec(), out))
        }
        Primitive::CrossEntropy { targets, weights } => {
            expect_arity(prim, inputs, 1)?;
            let logits = inputs[0];
            if logits.rank() != 2 || targets.len() != logits.shape()[0] || weights.len() != targets.len() {
                return Err(mismatch(op, logits.shape(), &[targets.len(), weights.len()]));
            }
            let vocab = logits.shape()[1];
            let mut total = 0.0;
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if t >= vocab {
                    return Err(Error::TokenOutOfRange { id: t, size: vocab });
                }
                if w == 0.0 {
                    continue;
                }
                let row = logits.row(r);
                total += w * (log_sum_exp(row) - row[t]);
            }
            Ok(Tensor::scalar(total))
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>())
}

fn conv_row(signal: &[f64], filter: &[f64], out: &mut [f64]) {
    let len = signal.len() as isize;
    let center = (filter.len() / 2) as isize;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &f) in filter.iter().enumerate() {
            let src = i as isize + center - j as isize;
            if (0..len).contains(&src) {
                acc += f * signal[src as usize];
            }
        }
        *o = acc;
    }
}

fn reduce_into(acc: &mut [f64], contrib: impl Iterator<Item = f64>, plan: &Broadcast) {
    match plan {
        Broadcast::Same => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        Broadcast::Cycle(p) => {
            for (i, c) in contrib.enumerate() {
                acc[i % p] += c;
            }
        }
        Broadcast::Map(map) => {
            for (c, &j) in contrib.zip(map) {
                acc[j] += c;
            }
        }
    }
}

/// Adds the contribution of `g` (gradient of the output) to the gradient of input `which`.
fn backward(prim: &Primitive, which: usize, inputs: &[&Tensor], out: &Tensor, g: &[f64], acc: &mut [f64]) {
    match prim {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if which == 0 {
                gemm(r, c, k, g, false, b.data(), true, acc, 1.0);
            } else {
                gemm(k, r, c, a.data(), true, g, false, acc, 1.0);
            }
        }
        Primitive::MatMulTransB => {
            let (a, w) = (inputs[0], inputs[1]);
            let (r, k, c) = (a.shape()[0], a.shape()[1], w.shape()[0]);
            if which == 0 {
                gemm(r, c, k, g, false, w.data(), false, acc, 1.0);
            } else {
                gemm(c, r, k, g, true, a.data(), false, acc, 1.0);
            }
        }
        Primitive::Add => {
            if which == 0 {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            } else {
                let plan = broadcast_plan(inputs[0].shape(), inputs[1].shape(), "add")
                    .expect("validated in forward");
                reduce_into(acc, g.iter().copied(), &plan);
            }
        }
        Primitive::Mul => {
            let (x, y) = (inputs[0], inputs[1]);
            let plan = broadcast_plan(x.shape(), y.shape(), "mul").expect("validated in forward");
            if which == 0 {
                let scaled = broadcast_zip(g, y.data(), &plan, |gv, yv| gv * yv);
                acc.iter_mut().zip(scaled).for_each(|(a, v)| *a += v);
            } else {
                reduce_into(acc, g.iter().zip(x.data()).map(|(gv, xv)| gv * xv), &plan);
            }
        }
        Primitive::Scale(c) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += c * v),
        Primitive::Tanh => acc
            .iter_mut()
            .zip(g.iter().zip(out.data()))
            .for_each(|(a, (gv, y))| *a += gv * (1.0 - y * y)),
        Primitive::Sigmoid => acc
            .iter_mut()
            .zip(g.iter().zip(out.data()))
            .for_each(|(a, (gv, y))| *a += gv * y * (1.0 - y)),
        Primitive::Softmax | Primitive::MaskedSoftmax { .. } => {
            let cols = out.last_dim();
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((a, yv), gv) in acc[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gr) {
                    *a += yv * (gv - dot);
                }
            }
        }
        Primitive::Concat => {
            let offset: usize = inputs[..which].iter().map(|t| t.last_dim()).sum();
            let width = inputs[which].last_dim();
            let total = out.last_dim();
            for r in 0..out.rows() {
                let src = &g[r * total + offset..r * total + offset + width];
                acc[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, v)| *a += v);
            }
        }
        Primitive::Slice { start, end } => {
            let width = end - start;
            let cols = inputs[0].last_dim();
            for r in 0..out.rows() {
                acc[r * cols + start..r * cols + end]
                    .iter_mut()
                    .zip(&g[r * width..(r + 1) * width])
                    .for_each(|(a, v)| *a += v);
            }
        }
        Primitive::ConvSame => {
            let (s, f) = (inputs[0], inputs[1]);
            let len = s.last_dim();
            let center = (f.len() / 2) as isize;
            for r in 0..s.rows() {
                let gr = &g[r * len..(r + 1) * len];
                let sr = s.row(r);
                for (i, &gv) in gr.iter().enumerate() {
                    for (j, &fv) in f.data().iter().enumerate() {
                        let src = i as isize + center - j as isize;
                        if (0..len as isize).contains(&src) {
                            if which == 0 {
                                acc[r * len + src as usize] += fv * gv;
                            } else {
                                acc[j] += sr[src as usize] * gv;
                            }
                        }
                    }
                }
            }
        }
        Primitive::Embedding { ids } => {
            let vocab = inputs[0].shape()[1];
            let dim = inputs[0].shape()[0];
            for (r, &id) in ids.iter().enumerate() {
                for d in 0..dim {
                    acc[d * vocab + id] += g[r * dim + d];
                }
            }
        }
        Primitive::Dropout { mask } => acc
            .iter_mut()
            .zip(g.iter().zip(mask))
            .for_each(|(a, (gv, m))| *a += gv * m),
        Primitive::Sum => acc.iter_mut().for_each(|a| *a += g[0]),
        Primitive::Reshape { .. } => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        Primitive::Stack => {
            let (b, count, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            for r in 0..b {
                let src = &g[(r * count + which) * d..(r * count + which + 1) * d];
                acc[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, v)| *a += v);
            }
        }
        Primitive::WeightedSum => {
            let (w, v) = (inputs[0], inputs[1]);
            let (b, a, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            for r in 0..b {
                let gr = &g[r * d..(r + 1) * d];
                for i in 0..a {
                    let base = (r * a + i) * d;
                    if which == 0 {
                        let vals = &v.data()[base..base + d];
                        acc[r * a + i] += vals.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>();
                    } else {
                        let wi = w.data()[r * a + i];
                        acc[base..base + d]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(x, y)| *x += wi * y);
                    }
                }
            }
        }
        Primitive::RowSelect { keep_new } => {
            let stride = out.len() / keep_new.len().max(1);
            for (r, &k) in keep_new.iter().enumerate() {
                if k == (which == 0) {
                    acc[r * stride..(r + 1) * stride]
                        .iter_mut()
                        .zip(&g[r * stride..(r + 1) * stride])
                        .for_each(|(a, v)| *a += v);
                }
            }
        }
        Primitive::CrossEntropy { targets, weights } => {
            let logits = inputs[0];
            let vocab = logits.shape()[1];
            let mut probs = vec![0.0; vocab];
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                softmax_row(logits.row(r), None, &mut probs).expect("unmasked softmax");
                let scale = g[0] * w;
                let a = &mut acc[r * vocab..(r + 1) * vocab];
                for (v, (av, p)) in a.iter_mut().zip(&probs).enumerate() {
                    *av += scale * (p - if v == t { 1.0 } else { 0.0 });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn eval(prim: Primitive, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = tape.apply(prim, &ids)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = eval(Primitive::Softmax, &[t(&[4], &[0.0; 4])]).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = eval(Primitive::Softmax, &[t(&[3], &[1.0, 2.0, 3.0])]).unwrap();
        let b = eval(Primitive::Softmax, &[t(&[3], &[101.0, 102.0, 103.0])]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_with_identity_filter() {
        let y = eval(Primitive::ConvSame, &[t(&[3], &[0.2, 0.5, 0.3]), t(&[1], &[1.0])]).unwrap();
        assert_eq!(y.data(), &[0.2, 0.5, 0.3]);
    }

    #[test]
    fn conv_spreads_one_hot() {
        let y = eval(
            Primitive::ConvSame,
            &[t(&[4], &[1.0, 0.0, 0.0, 0.0]), t(&[3], &[0.25, 0.5, 0.25])],
        )
        .unwrap();
        assert_eq!(y.data(), &[0.5, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn conv_rejects_even_filter() {
        let err = eval(Primitive::ConvSame, &[t(&[3], &[0.0; 3]), t(&[2], &[1.0, 1.0])]);
        assert!(matches!(err, Err(Error::ShapeMismatch { op: "conv_same", .. })));
    }

    #[test]
    fn matmul_by_hand() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = eval(Primitive::MatMul, &[a, b]).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[22.0, 28.0, 49.0, 64.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = eval(
            Primitive::MatMul,
            &[Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 2])],
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 2]
            }
        );
    }

    #[test]
    fn unknown_primitive_name() {
        assert!(matches!(
            "frobnicate".parse::<Primitive>(),
            Err(Error::UnknownPrimitive(_))
        ));
        assert_eq!("tanh".parse::<Primitive>().unwrap(), Primitive::Tanh);
    }

    #[test]
    fn broadcast_middle_axis() {
        let x = Tensor::zeros(&[2, 3, 2]);
        let y = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let z = eval(Primitive::Add, &[x, y]).unwrap();
        assert_eq!(
            z.data(),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
        );
    }

    #[test]
    fn masked_softmax_zeroes_masked() {
        let y = eval(
            Primitive::MaskedSoftmax {
                mask: vec![true, false, true],
            },
            &[t(&[3], &[1.0, 50.0, 1.0])],
        )
        .unwrap();
        assert_eq!(y.data(), &[0.5, 0.0, 0.5]);
        let err = eval(
            Primitive::MaskedSoftmax {
                mask: vec![false, false],
            },
            &[t(&[2], &[1.0, 2.0])],
        );
        assert_eq!(err.unwrap_err(), Error::AllMasked);
    }

    #[test]
    fn softmax_propagates_nan() {
        let y = eval(
            Primitive::MaskedSoftmax {
                mask: vec![true, true],
            },
            &[t(&[2], &[f64::NAN, 1.0])],
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn backprop_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.parameter("w", t(&[3], &[0.3, -1.0, 2.0]));
        let loss = tape.sum(w).unwrap();
        let g = tape.backprop(loss).unwrap();
        assert_eq!(g["w"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backprop_of_tanh_at_zero() {
        let mut tape = Tape::new();
        let w = tape.parameter("w", Tensor::scalar(0.0));
        let loss = tape.tanh(w).unwrap();
        assert_eq!(tape.backprop(loss).unwrap()["w"].data(), &[1.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.parameter("w", t(&[2], &[1.0, 2.0]));
        tape.parameter("unused", t(&[2, 2], &[1.0; 4]));
        let loss = tape.sum(w).unwrap();
        let g = tape.backprop(loss).unwrap();
        assert_eq!(g["unused"].data(), &[0.0; 4]);
    }

    #[test]
    fn backprop_errors() {
        let mut tape = Tape::new();
        let w = tape.parameter("w", t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backprop(w).unwrap_err(), Error::NonScalarLoss(vec![2]));
        assert_eq!(tape.backprop(NodeId(7)).unwrap_err(), Error::UnknownNode(7));
    }

    #[test]
    fn replay_reproduces_values() {
        let mut tape = Tape::new();
        let a = tape.parameter("a", t(&[2, 2], &[0.1, -0.4, 0.9, 0.3]));
        let b = tape.constant(t(&[2], &[0.5, -0.5]));
        let c = tape.add(a, b).unwrap();
        let d = tape.tanh(c).unwrap();
        let e = tape.softmax(d).unwrap();
        tape.sum(e).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(NodeId(i)));
        }
    }
}
