use std::collections::BTreeMap;
use std::ops::Range;

use super::ops::{self, CrossEntropyCache, LayerNormCache, MatMulDims};
use super::{Indices, Result, Tensor, TensorError};

/// Identity of a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter node.
pub type Grads = BTreeMap<NodeId, Tensor>;

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, dims: MatMulDims },
    Add { big: NodeId, small: NodeId },
    Mul { big: NodeId, small: NodeId },
    Scale { a: NodeId, factor: f64 },
    Relu { a: NodeId },
    Softmax { a: NodeId, width: usize },
    Embedding { table: NodeId, ids: Indices },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: LayerNormCache },
    CrossEntropy {
        logits: NodeId,
        targets: Indices,
        ignore: Option<usize>,
        cache: CrossEntropyCache,
    },
    Reshape { a: NodeId },
    Slice { a: NodeId, axis: usize, range: Range<usize> },
    Concat { parts: Vec<NodeId>, widths: Vec<usize> },
    Sum { a: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape { .. } => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// `Some(b)` when the leading axis indexes `b` independent examples.
    batch: Option<usize>,
    /// Output depends jointly on several examples.
    mixed: bool,
    requires_grad: bool,
}

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Nodes are stored in creation order, so every node's inputs precede it.
/// Leaves are either trainable parameters, shared constants, or example
/// inputs whose leading axis is the example axis. The tape propagates the
/// example axis through every op and flags any op that reduces across it,
/// which is what makes [`Tape::per_example_grads`] possible.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
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

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Example-axis size of a node, if it has one.
    pub fn batch_of(&self, id: NodeId) -> Option<usize> {
        self.nodes[id.0].batch
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    fn push(&mut self, value: Tensor, op: Op, batch: Option<usize>, mixed: bool, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            batch,
            mixed,
            requires_grad,
        });
        id
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, None, false, true);
        self.params.push(id);
        id
    }

    /// Non-trainable leaf shared by all examples.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, None, false, false)
    }

    /// Non-trainable leaf whose leading axis is the example axis.
    pub fn example_input(&mut self, value: Tensor) -> NodeId {
        let b = value.shape().first().copied();
        assert!(b.is_some(), "example input needs a leading axis");
        self.push(value, Op::Leaf, b, false, false)
    }

    fn unary_meta(&self, a: NodeId) -> Result<(Option<usize>, bool, bool)> {
        let n = self.node(a)?;
        Ok((n.batch, n.mixed, n.requires_grad))
    }

    /// `op(a) @ op(b)` where `op` optionally transposes the trailing two axes.
    /// Leading axes must match, or one operand must be a plain matrix.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let dims = MatMulDims::resolve(na.value.shape(), nb.value.shape(), ta, tb)?;
        let data = dims.forward(na.value.data(), nb.value.data());
        let mut mixed = na.mixed || nb.mixed;
        let batch = match (na.batch, nb.batch) {
            (Some(x), Some(y)) if x == y && dims.a_outer && dims.b_outer => Some(x),
            (Some(x), None) if !dims.b_outer => Some(x),
            (None, Some(y)) if !dims.a_outer => Some(y),
            (None, None) => None,
            _ => {
                mixed = true;
                None
            }
        };
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::from_parts(dims.out_shape.clone(), data);
        Ok(self.push(value, Op::MatMul { a, b, dims }, batch, mixed, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// Orders two broadcast operands as (big, small) and derives batch flags.
    fn broadcast_pair(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(NodeId, NodeId, Option<usize>, bool, bool)> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (big, small, nbig, nsmall) = if na.value.rank() >= nb.value.rank() {
            (a, b, na, nb)
        } else {
            (b, a, nb, na)
        };
        ops::suffix_broadcast(op, nbig.value.shape(), nsmall.value.shape())?;
        let same = nbig.value.shape() == nsmall.value.shape();
        let mut mixed = na.mixed || nb.mixed;
        let batch = match (nbig.batch, nsmall.batch) {
            (Some(x), None) => Some(x),
            (None, None) => None,
            (Some(x), Some(y)) if x == y && same => Some(x),
            (None, Some(y)) if same => Some(y),
            _ => {
                mixed = true;
                None
            }
        };
        Ok((big, small, batch, mixed, na.requires_grad || nb.requires_grad))
    }

    /// Elementwise sum; the lower-rank operand broadcasts as a trailing suffix.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (big, small, batch, mixed, rg) = self.broadcast_pair("add", a, b)?;
        let data = ops::broadcast_add(self.value(big).data(), self.value(small).data());
        let value = Tensor::from_parts(self.value(big).shape().to_vec(), data);
        Ok(self.push(value, Op::Add { big, small }, batch, mixed, rg))
    }

    /// Elementwise product; the lower-rank operand broadcasts as a trailing suffix.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (big, small, batch, mixed, rg) = self.broadcast_pair("mul", a, b)?;
        let data = ops::broadcast_mul(self.value(big).data(), self.value(small).data());
        let value = Tensor::from_parts(self.value(big).shape().to_vec(), data);
        Ok(self.push(value, Op::Mul { big, small }, batch, mixed, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(TensorError::Invalid {
                op: "scale",
                msg: format!("non-finite factor {factor}"),
            });
        }
        let (batch, mixed, rg) = self.unary_meta(a)?;
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect());
        Ok(self.push(value, Op::Scale { a, factor }, batch, mixed, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let (batch, mixed, rg) = self.unary_meta(a)?;
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect());
        Ok(self.push(value, Op::Relu { a }, batch, mixed, rg))
    }

    /// Softmax over the last axis. `mask`, when given, has one flag per
    /// element; `false` entries get probability exactly zero.
    pub fn softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (batch, mixed, rg) = self.unary_meta(a)?;
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    lhs: x.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let width = *x.shape().last().ok_or_else(|| TensorError::Invalid {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let value = Tensor::from_parts(x.shape().to_vec(), ops::softmax_rows(x.data(), width, mask));
        Ok(self.push(value, Op::Softmax { a, width }, batch, mixed, rg))
    }

    /// Row gather from a `vocab x dim` table. `example_axis` marks the leading
    /// axis of `ids` as the example axis.
    pub fn embedding(&mut self, table: NodeId, ids: &Indices, example_axis: bool) -> Result<NodeId> {
        let nt = self.node(table)?;
        let tshape = nt.value.shape();
        if tshape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be 2-D, got {tshape:?}"),
            });
        }
        let (vocab, dim) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.data().iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let mut mixed = nt.mixed;
        let batch = match (example_axis, nt.batch) {
            (true, None) => Some(ids.shape()[0]),
            (false, None) => None,
            _ => {
                mixed = true;
                None
            }
        };
        let data = ops::embedding(nt.value.data(), dim, ids.data());
        let mut shape = ids.shape().to_vec();
        shape.push(dim);
        let rg = nt.requires_grad;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Embedding { table, ids: ids.clone() }, batch, mixed, rg))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (nx, ng, nb) = (self.node(x)?, self.node(gamma)?, self.node(beta)?);
        let d = *nx.value.shape().last().unwrap_or(&0);
        for n in [ng, nb] {
            if n.value.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: nx.value.shape().to_vec(),
                    rhs: n.value.shape().to_vec(),
                });
            }
        }
        let mut mixed = nx.mixed || ng.mixed || nb.mixed;
        if ng.batch.is_some() || nb.batch.is_some() {
            mixed = true;
        }
        let batch = if mixed { None } else { nx.batch };
        let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
        let (y, cache) = ops::layer_norm(nx.value.data(), ng.value.data(), nb.value.data(), eps);
        let value = Tensor::from_parts(nx.value.shape().to_vec(), y);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, cache }, batch, mixed, rg))
    }

    /// Mean token cross-entropy. `logits` is `[..., steps, vocab]` and
    /// `targets` is `[..., steps]`; the result drops the last two axes of the
    /// logits. Positions whose target equals `ignore` contribute nothing.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &Indices, ignore: Option<usize>) -> Result<NodeId> {
        let nl = self.node(logits)?;
        let shape = nl.value.shape();
        if shape.len() < 2 || targets.shape() != &shape[..shape.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let vocab = shape[shape.len() - 1];
        let steps = shape[shape.len() - 2];
        let (losses, cache) = ops::cross_entropy(nl.value.data(), vocab, steps, targets.data(), ignore)?;
        let out_shape = shape[..shape.len() - 2].to_vec();
        let mut mixed = nl.mixed;
        let batch = match nl.batch {
            Some(b) if shape.len() >= 3 => Some(b),
            Some(_) => {
                mixed = true;
                None
            }
            None => None,
        };
        let rg = nl.requires_grad;
        let value = Tensor::from_parts(out_shape, losses);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.clone(),
            ignore,
            cache,
        };
        Ok(self.push(value, op, batch, mixed, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let na = self.node(a)?;
        let numel: usize = shape.iter().product();
        if numel != na.value.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: na.value.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let mut mixed = na.mixed;
        let batch = match na.batch {
            Some(b) if shape.first() == Some(&b) => Some(b),
            Some(_) => {
                mixed = true;
                None
            }
            None => None,
        };
        let rg = na.requires_grad;
        let value = Tensor::from_parts(shape.to_vec(), na.value.data().to_vec());
        Ok(self.push(value, Op::Reshape { a }, batch, mixed, rg))
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let na = self.node(a)?;
        let shape = na.value.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {shape:?}"),
            });
        }
        let data = ops::slice_axis(na.value.data(), shape, axis, start..end);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let mut mixed = na.mixed;
        let batch = match na.batch {
            Some(_) if axis == 0 => {
                mixed = true;
                None
            }
            b => b,
        };
        let rg = na.requires_grad;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(value, Op::Slice { a, axis, range: start..end }, batch, mixed, rg))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.node(*parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?)?;
        let lead = first.value.shape()[..first.value.rank().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        let mut mixed = false;
        let mut rg = false;
        let batch = first.batch;
        for &p in parts {
            let n = self.node(p)?;
            let s = n.value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
            mixed |= n.mixed || n.batch != batch;
            rg |= n.requires_grad;
        }
        let batch = if mixed { None } else { batch };
        let bufs: Vec<&[f64]> = parts.iter().map(|&p| self.value(p).data()).collect();
        let data = ops::concat_last(&bufs, &widths);
        let mut shape = lead;
        shape.push(widths.iter().sum());
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), widths }, batch, mixed, rg))
    }

    /// Sum of all elements. Summing over the example axis mixes examples.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.node(a)?;
        let mixed = na.mixed || na.batch.is_some();
        let rg = na.requires_grad;
        let value = Tensor::from_parts(Vec::new(), vec![na.value.data().iter().sum()]);
        Ok(self.push(value, Op::Sum { a }, None, mixed, rg))
    }

    /// Gradient of a single-element `loss` with respect to every parameter.
    /// Parameters the loss does not depend on get a zero tensor.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        let nl = self.node(loss)?;
        if nl.value.len() != 1 {
            return Err(TensorError::NotScalar(nl.value.shape().to_vec()));
        }
        let mut grads = self.sweep(loss, Tensor::ones(nl.value.shape()), None)?;
        Ok(self
            .params
            .iter()
            .map(|&p| {
                let g = grads.get_mut(p.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(self.value(p).shape()));
                (p, g)
            })
            .collect())
    }

    /// Per-example parameter gradients for a `[B]` vector of losses.
    ///
    /// Entry `i` equals `backward` of `losses[i]` alone. Parameter gradients
    /// are kept split along the example axis during a single reverse sweep
    /// rather than summed. Fails when any op upstream of the losses reduced
    /// across examples.
    pub fn per_example_grads(&self, losses: NodeId) -> Result<Vec<Grads>> {
        let stacked = self.per_example_stacked(losses)?;
        let b = self.value(losses).len();
        let mut out: Vec<Grads> = (0..b).map(|_| Grads::new()).collect();
        for (p, g) in stacked {
            let pshape = self.value(p).shape();
            let inner = g.len() / b;
            for (i, per) in out.iter_mut().enumerate() {
                per.insert(p, Tensor::from_parts(pshape.to_vec(), g.data()[i * inner..(i + 1) * inner].to_vec()));
            }
        }
        Ok(out)
    }

    /// Same as [`Tape::per_example_grads`] but each parameter's gradients are
    /// returned stacked as one `[B, ...shape]` tensor.
    pub fn per_example_stacked(&self, losses: NodeId) -> Result<Grads> {
        let nl = self.node(losses)?;
        let shape = nl.value.shape();
        let b = match (nl.batch, shape) {
            (Some(b), [n]) if *n == b && !nl.mixed => b,
            _ if nl.mixed => {
                return Err(TensorError::MixedExamples(
                    "an upstream op reduces across the example axis".into(),
                ))
            }
            _ => {
                return Err(TensorError::MixedExamples(format!(
                    "losses must be a [B] vector over the example axis, got shape {shape:?}"
                )))
            }
        };
        let mut grads = self.sweep(losses, Tensor::ones(&[b]), Some(b))?;
        Ok(self
            .params
            .iter()
            .map(|&p| {
                let g = grads.get_mut(p.0).and_then(Option::take).unwrap_or_else(|| {
                    let mut stacked = vec![b];
                    stacked.extend_from_slice(self.value(p).shape());
                    Tensor::zeros(&stacked)
                });
                (p, g)
            })
            .collect())
    }

    /// Reverse sweep from `root`. With `per_example = Some(b)`, gradients of
    /// nodes without an example axis are stored stacked as `[b, ...shape]`.
    fn sweep(&self, root: NodeId, seed: Tensor, per_example: Option<usize>) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = match per_example {
                Some(b) if node.batch.is_none() => self.stacked_grads(id, &g, b)?,
                pe => self.input_grads(id, &g, pe)?,
            };
            for (inp, t) in contributions {
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot => *slot = Some(t),
                }
            }
        }
        Ok(grads)
    }

    /// Per-example backward through a node with no example axis: each
    /// example's slice of the stacked gradient is pushed through separately.
    fn stacked_grads(&self, id: usize, g: &Tensor, b: usize) -> Result<Vec<(NodeId, Tensor)>> {
        let mut stacked: Vec<(NodeId, Vec<f64>, Vec<usize>)> = Vec::new();
        for e in 0..b {
            for (k, (inp, t)) in self.input_grads(id, &g.outer(e), None)?.into_iter().enumerate() {
                if e == 0 {
                    let mut shape = vec![b];
                    shape.extend_from_slice(t.shape());
                    stacked.push((inp, Vec::with_capacity(b * t.len()), shape));
                }
                stacked[k].1.extend_from_slice(t.data());
            }
        }
        Ok(stacked
            .into_iter()
            .map(|(inp, data, shape)| (inp, Tensor::from_parts(shape, data)))
            .collect())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shared(&self, id: NodeId) -> bool {
        self.nodes[id.0].batch.is_none()
    }

    /// Gradient contributions to the inputs of node `id` given its output
    /// gradient `g`. In per-example mode (`pe = Some(b)`, node has an example
    /// axis) contributions to shared inputs are returned stacked `[b, ...]`.
    fn input_grads(&self, id: usize, g: &Tensor, pe: Option<usize>) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[id];
        let gd = g.data();
        let mut out = Vec::with_capacity(3);
        let like = |src: NodeId, data: Vec<f64>| Tensor::from_parts(self.value(src).shape().to_vec(), data);
        // per-example split of a shared input's gradient: one range per example
        let split = |src: NodeId, f: &dyn Fn(Range<usize>) -> Vec<f64>, total: usize| -> Tensor {
            let b = pe.expect("split used only in per-example mode");
            let per = total / b;
            let mut data = Vec::with_capacity(b * self.value(src).len());
            for e in 0..b {
                data.extend(f(e * per..(e + 1) * per));
            }
            let mut shape = vec![b];
            shape.extend_from_slice(self.value(src).shape());
            Tensor::from_parts(shape, data)
        };
        let split_mode = |src: NodeId| pe.is_some() && self.shared(src);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    if split_mode(*a) {
                        out.push((*a, split(*a, &|r| dims.grad_a_shared(bv, gd, r), dims.outer)));
                    } else {
                        out.push((*a, like(*a, dims.grad_a(bv, gd))));
                    }
                }
                if self.needs(*b) {
                    if split_mode(*b) {
                        out.push((*b, split(*b, &|r| dims.grad_b_shared(av, gd, r), dims.outer)));
                    } else {
                        out.push((*b, like(*b, dims.grad_b(av, gd))));
                    }
                }
            }
            Op::Add { big, small } => {
                if self.needs(*big) {
                    out.push((*big, like(*big, gd.to_vec())));
                }
                if self.needs(*small) {
                    let sl = self.value(*small).len();
                    if split_mode(*small) {
                        out.push((*small, split(*small, &|r| ops::reduce_blocks(gd, sl, r), gd.len())));
                    } else {
                        out.push((*small, like(*small, ops::reduce_blocks(gd, sl, 0..gd.len()))));
                    }
                }
            }
            Op::Mul { big, small } => {
                let (bv, sv) = (self.value(*big).data(), self.value(*small).data());
                if self.needs(*big) {
                    out.push((*big, like(*big, ops::broadcast_mul(gd, sv))));
                }
                if self.needs(*small) {
                    let sl = sv.len();
                    if split_mode(*small) {
                        out.push((*small, split(*small, &|r| ops::reduce_blocks_mul(gd, bv, sl, r), gd.len())));
                    } else {
                        out.push((*small, like(*small, ops::reduce_blocks_mul(gd, bv, sl, 0..gd.len()))));
                    }
                }
            }
            Op::Scale { a, factor } => {
                out.push((*a, like(*a, gd.iter().map(|v| v * factor).collect())));
            }
            Op::Relu { a } => {
                let y = node.value.data();
                out.push((*a, like(*a, gd.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect())));
            }
            Op::Softmax { a, width } => {
                out.push((*a, like(*a, ops::softmax_rows_backward(node.value.data(), gd, *width))));
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let ts = self.value(*table).shape();
                    let (vocab, dim) = (ts[0], ts[1]);
                    let n = ids.data().len();
                    if split_mode(*table) {
                        out.push((*table, split(*table, &|r| ops::embedding_grad(vocab, dim, ids.data(), gd, r), n)));
                    } else {
                        out.push((*table, like(*table, ops::embedding_grad(vocab, dim, ids.data(), gd, 0..n))));
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                if self.needs(*x) {
                    out.push((*x, like(*x, ops::layer_norm_grad_x(cache, gv, gd))));
                }
                if self.needs(*gamma) {
                    if split_mode(*gamma) {
                        out.push((*gamma, split(*gamma, &|r| ops::reduce_blocks_mul(gd, &cache.xhat, d, r), gd.len())));
                    } else {
                        out.push((*gamma, like(*gamma, ops::reduce_blocks_mul(gd, &cache.xhat, d, 0..gd.len()))));
                    }
                }
                if self.needs(*beta) {
                    if split_mode(*beta) {
                        out.push((*beta, split(*beta, &|r| ops::reduce_blocks(gd, d, r), gd.len())));
                    } else {
                        out.push((*beta, like(*beta, ops::reduce_blocks(gd, d, 0..gd.len()))));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                cache,
            } => {
                let ls = self.value(*logits).shape();
                let vocab = ls[ls.len() - 1];
                let steps = ls[ls.len() - 2];
                out.push((
                    *logits,
                    like(*logits, ops::cross_entropy_backward(cache, vocab, steps, targets.data(), *ignore, gd)),
                ));
            }
            Op::Reshape { a } => out.push((*a, like(*a, gd.to_vec()))),
            Op::Slice { a, axis, range } => {
                let shape = self.value(*a).shape();
                out.push((*a, like(*a, ops::slice_axis_backward(gd, shape, *axis, range.clone()))));
            }
            Op::Concat { parts, widths } => {
                for (p, data) in parts.iter().zip(ops::concat_last_backward(gd, widths)) {
                    if self.needs(*p) {
                        out.push((*p, like(*p, data)));
                    }
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                out.push((*a, like(*a, vec![gd[0]; n])));
            }
        }
        out.retain(|(inp, _)| self.needs(*inp));
        if pe.is_some() {
            // every shared input must have received a stacked gradient above
            for (inp, t) in &out {
                if self.shared(*inp) && t.shape().len() != self.value(*inp).rank() + 1 {
                    return Err(TensorError::MixedExamples(format!(
                        "{} cannot split gradients of a shared operand per example",
                        node.op.name()
                    )));
                }
            }
        }
        Ok(out)
    }
}
