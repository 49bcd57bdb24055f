//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every op pushes one node whose inputs
//! already live on the tape, so the node list is a topological order and the
//! backward pass is a single reverse sweep. Graphs are rebuilt every step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{split_at_axis, Tensor};

/// Differentiable primitives the tape understands. Everything else (cosine,
/// log-softmax, losses) is composed from these.
pub const OP_SET: &[&str] = &[
    "matmul",
    "add",
    "scale",
    "elementwise-add",
    "elementwise-sub",
    "elementwise-mul",
    "exp",
    "log",
    "softmax",
    "layer-norm",
    "gelu",
    "embedding",
    "slice",
    "concat",
    "mean",
    "sum",
    "transpose",
    "masked-fill",
];

pub fn op_set() -> &'static [&'static str] {
    OP_SET
}

pub fn supports(op: &str) -> bool {
    OP_SET.contains(&op)
}

/// Zero-norm guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    /// Broadcasting binary op; `name` records which op-set entry produced it.
    Binary(Binary, NodeId, NodeId, &'static str),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    Slice { x: NodeId, axis: usize, start: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    Sum { x: NodeId, axis: usize },
    Mean { x: NodeId, axis: usize },

    Transpose(NodeId),
    MaskedFill { x: NodeId, mask: Vec<bool> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Binary(_, _, _, name) => name,
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Gelu(_) => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Transpose(_) => "transpose",
            Op::MaskedFill { .. } => "masked-fill",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_leaf.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<(NodeId, &'static str)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Op name of a node, for diagnostics.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Input node ids of `id`; every one of them is smaller than `id`.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b, _) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Transpose(x)
            | Op::Slice { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::MaskedFill { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }

    /// First node whose forward value was non-finite, if any.
    pub fn fault(&self) -> Option<(NodeId, &'static str)> {
        self.fault
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            None => Ok(()),
            Some((id, name)) => Err(Error::numeric(format!(
                "non-finite value produced by node {} ({name})",
                id.0
            ))),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((id, op.name()));
        }
        self.nodes.push(Node { op, value, requires_grad });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A non-trainable input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// `[.., m, k] x [k, n]` (shared right operand) or `[b.., m, k] x [b.., k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2, got {sa:?} x {sb:?}");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, kb, "matmul inner dims differ: {sa:?} x {sb:?}");
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; out_shape.iter().product()];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sb.len() == 2 {
            let rows = av.len() / k;
            gemm(rows, k, n, av, false, bv, false, &mut out, false);
        } else {
            assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul batch dims differ");
            let batch = av.len() / (m * k);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Tensor::from_parts(out_shape, out), rg)
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId, name: &'static str) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("{name}: shapes {sa:?} and {sb:?} do not broadcast"));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&sa, &out_shape);
            let ib = broadcast_index(&sb, &out_shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Binary(kind, a, b, name), Tensor::from_parts(out_shape, out), rg)
    }

    /// Broadcasting addition (bias adds, column offsets).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn elem_add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "elementwise-add needs equal shapes");
        self.binary(Binary::Add, a, b, "elementwise-add")
    }

    /// Elementwise subtraction; `b` may broadcast onto `a`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Binary::Sub, a, b, "elementwise-sub")
    }

    /// Elementwise product; `b` may broadcast onto `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Binary::Mul, a, b, "elementwise-mul")
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect());
        let rg = self.rg(x);
        self.push(Op::Scale(x, s), out, rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = map(self.value(x), f64::exp);
        let rg = self.rg(x);
        self.push(Op::Exp(x), out, rg)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let out = map(self.value(x), f64::ln);
        let rg = self.rg(x);
        self.push(Op::Log(x), out, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(Op::Softmax(x), out, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of size `[d]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = self.value(x);
        let d = v.last_dim();
        assert_eq!(self.value(gamma).numel(), d, "layer-norm gamma size");
        assert_eq!(self.value(beta).numel(), d, "layer-norm beta size");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = v.numel() / d;
        let mut xhat = vec![0.0; v.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, out, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = map(self.value(x), |a| {
            let (t, _) = gelu_parts(a);
            0.5 * a * (1.0 + t)
        });
        let rg = self.rg(x);
        self.push(Op::Gelu(x), out, rg)
    }

    /// Row lookup into a `[vocab, d]` table. Output shape is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], ids_shape: &[usize]) -> NodeId {
        let t = self.value(table);
        assert_eq!(t.rank(), 2, "embedding table must be rank 2");
        assert_eq!(ids.len(), ids_shape.iter().product::<usize>(), "ids do not match ids_shape");
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding id {id} out of range {vocab}");
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        self.push(Op::Embedding { table, ids: ids.to_vec() }, Tensor::from_parts(shape, out), rg)
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let v = self.value(x);
        let (outer, len, inner) = split_at_axis(v.shape(), axis);
        assert!(start < end && end <= len, "slice {start}..{end} out of axis length {len}");
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = w;
        let rg = self.rg(x);
        self.push(Op::Slice { x, axis, start }, Tensor::from_parts(shape, out), rg)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch off axis");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Op::Concat { xs: xs.to_vec(), axis }, Tensor::from_parts(shape, out), rg)
    }

    fn reduce(&mut self, x: NodeId, axis: usize, mean: bool, keepdim: bool) -> NodeId {
        let v = self.value(x);
        let (outer, len, inner) = split_at_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|e| *e *= inv);
        }
        let mut shape = v.shape().to_vec();
        if keepdim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let rg = self.rg(x);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        self.push(op, Tensor::from_parts(shape, out), rg)
    }

    /// Sum over `axis`, dropping it (a rank-1 input keeps one element).
    pub fn sum(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.reduce(x, axis, false, false)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_keepdim(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.reduce(x, axis, false, true)
    }

    /// Mean over `axis`, dropping it.
    pub fn mean(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.reduce(x, axis, true, false)
    }

    pub fn mean_keepdim(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.reduce(x, axis, true, true)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.shape();
        assert!(s.len() >= 2, "transpose needs rank >= 2");
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = v.numel() / (r * c);
        let mut out = vec![0.0; v.numel()];
        for b in 0..batch {
            transpose_block(&v.data()[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c], r, c);
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        self.push(Op::Transpose(x), Tensor::from_parts(shape, out), rg)
    }

    /// Replace entries where `mask` is true with `value`. The mask has the
    /// shape of `x`; masked entries receive no gradient.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], value: f64) -> NodeId {
        let v = self.value(x);
        assert_eq!(mask.len(), v.numel(), "mask size");
        let out: Vec<f64> =
            v.data().iter().zip(mask).map(|(&e, &m)| if m { value } else { e }).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(Op::MaskedFill { x, mask: mask.to_vec() }, out, rg)
    }

    // ---- composites -------------------------------------------------------

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut cur = x;
        while self.shape(cur).len() > 1 {
            cur = self.sum(cur, 0);
        }
        if self.shape(cur)[0] > 1 {
            cur = self.sum_keepdim(cur, 0);
        }
        if cur == x {
            // Already a single element; keep a distinct node so callers can scale it freely.
            cur = self.scale(x, 1.0);
        }
        cur
    }

    /// Numerically stable log-softmax over the last axis. The row max is a
    /// constant shift, which leaves both value and gradient exact.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.last_dim();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let maxes: Vec<f64> =
            v.data().chunks(d).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let neg_max = self.constant(Tensor::from_parts(shape.clone(), maxes.iter().map(|m| -m).collect()));
        let shifted = self.add(x, neg_max);
        let e = self.exp(shifted);
        let axis = shape.len() - 1;
        let z = self.sum_keepdim(e, axis);
        let lz = self.log(z);
        self.sub(shifted, lz)
    }

    /// Row-wise `1 / sqrt(|x|^2 + eps^2)` for `x` of shape `[n, d]`, shape `[n, 1]`.
    pub fn inverse_norms(&mut self, x: NodeId) -> NodeId {
        let sq = self.mul(x, x);
        let axis = self.shape(x).len() - 1;
        let ss = self.sum_keepdim(sq, axis);
        let rows = self.value(ss).numel();
        if let Some(r) = self.value(ss).data().iter().position(|&s| s.sqrt() < COSINE_EPS) {
            log::warn!("cosine similarity: row {r} of {rows} has near-zero norm; using epsilon guard");
        }
        let eps = self.constant(Tensor::scalar(COSINE_EPS * COSINE_EPS));
        let guarded = self.add(ss, eps);
        let l = self.log(guarded);
        let h = self.scale(l, -0.5);
        self.exp(h)
    }

    /// Differentiable cosine similarity of two equal-length vectors.
    /// The result has a single element.
    pub fn cosine_similarity(&mut self, u: NodeId, v: NodeId) -> NodeId {
        assert_eq!(self.shape(u), self.shape(v), "cosine similarity shape mismatch");
        let uv = self.mul(u, v);
        let dot = self.sum_all(uv);
        let uu = self.mul(u, u);
        let su = self.sum_all(uu);
        let vv = self.mul(v, v);
        let sv = self.sum_all(vv);
        if self.value(su).item().sqrt() < COSINE_EPS || self.value(sv).item().sqrt() < COSINE_EPS {
            log::warn!("cosine similarity of a near-zero vector; using epsilon guard");
        }
        let eps = self.constant(Tensor::from_parts(self.shape(su).to_vec(), vec![COSINE_EPS * COSINE_EPS]));
        let su = self.elem_add(su, eps);
        let sv = self.elem_add(sv, eps);
        let lu = self.log(su);
        let lv = self.log(sv);
        let l = self.elem_add(lu, lv);
        let h = self.scale(l, -0.5);
        let inv = self.exp(h);
        self.mul(dot, inv)
    }

    /// Pairwise cosine similarities between rows of `a` `[n, d]` and rows of
    /// `b` `[m, d]`, shape `[n, m]`.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a).len(), 2, "cosine_matrix expects [n, d]");
        assert_eq!(self.shape(b).len(), 2, "cosine_matrix expects [m, d]");
        let ra = self.inverse_norms(a);
        let rb = self.inverse_norms(b);
        let bt = self.transpose(b);
        let dots = self.matmul(a, bt);
        let rbt = self.transpose(rb);
        let denom = self.matmul(ra, rbt);
        self.mul(dots, denom)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check_finite()?;
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, node {} has shape {:?}",
                root.0,
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient at node {i} ({})",
                    node.op.name()
                )));
            }
            match &node.op {
                Op::Leaf => {
                    out.by_leaf.insert(NodeId(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Constant => {}
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (sa, sb) = (av.shape(), bv.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                if self.rg(a) {
                    let mut da = vec![0.0; av.numel()];
                    if sb.len() == 2 {
                        let rows = av.numel() / k;
                        gemm(rows, n, k, g, false, bv.data(), true, &mut da, false);
                    } else {
                        for i in 0..av.numel() / (m * k) {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                true,
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; bv.numel()];
                    if sb.len() == 2 {
                        let rows = av.numel() / k;
                        gemm(k, rows, n, av.data(), true, g, false, &mut db, false);
                    } else {
                        for i in 0..av.numel() / (m * k) {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut db[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Binary(kind, a, b, _) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let out_shape = out.shape();
                let same = sa == sb;
                if self.rg(a) {
                    let da: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => {
                            if same {
                                g.to_vec()
                            } else {
                                reduce_to(g, out_shape, sa)
                            }
                        }
                        Binary::Mul => {
                            let bv = self.value(b).data();
                            let prod: Vec<f64> = if same {
                                g.iter().zip(bv).map(|(x, y)| x * y).collect()
                            } else {
                                let ib = broadcast_index(sb, out_shape);
                                g.iter().zip(&ib).map(|(x, &j)| x * bv[j]).collect()
                            };
                            if same { prod } else { reduce_to(&prod, out_shape, sa) }
                        }
                    };
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = match kind {
                        Binary::Add => {
                            if same {
                                g.to_vec()
                            } else {
                                reduce_to(g, out_shape, sb)
                            }
                        }
                        Binary::Sub => {
                            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                            if same { neg } else { reduce_to(&neg, out_shape, sb) }
                        }
                        Binary::Mul => {
                            let av = self.value(a).data();
                            let prod: Vec<f64> = if same {
                                g.iter().zip(av).map(|(x, y)| x * y).collect()
                            } else {
                                let ia = broadcast_index(sa, out_shape);
                                g.iter().zip(&ia).map(|(x, &i)| x * av[i]).collect()
                            };
                            if same { prod } else { reduce_to(&prod, out_shape, sb) }
                        }
                    };
                    self.accumulate(grads, b, db);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, x, g.iter().map(|v| v * s).collect());
            }
            Op::Exp(x) => {
                let d = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                self.accumulate(grads, x, d);
            }
            Op::Log(x) => {
                let d = g.iter().zip(self.value(x).data()).map(|(gv, xv)| gv / xv).collect();
                self.accumulate(grads, x, d);
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(d).zip(out.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref rstd } => {
                let d = out.last_dim();
                let gam = self.value(gamma).data();
                if self.rg(x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
                if self.rg(gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, gamma, dg);
                }
                if self.rg(beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, beta, db);
                }
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, &a)| {
                        let (t, dinner) = gelu_parts(a);
                        gv * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner)
                    })
                    .collect();
                self.accumulate(grads, x, d);
            }
            Op::Embedding { table, ref ids } => {
                let tv = self.value(table);
                let dim = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (row, &id) in g.chunks(dim).zip(ids) {
                    for (dst, s) in dt[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                        *dst += s;
                    }
                }
                self.accumulate(grads, table, dt);
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(x);
                let (outer, len, inner) = split_at_axis(xv.shape(), axis);
                let w = out.shape()[axis];
                let mut dx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    dx[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                self.accumulate(grads, x, dx);
            }
            Op::Concat { ref xs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[axis];
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[src..src + len * inner]);
                        }
                        self.accumulate(grads, x, dx);
                    }
                    offset += len;
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xv = self.value(x);
                let (outer, len, inner) = split_at_axis(xv.shape(), axis);
                let f = if matches!(op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                let mut dx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * f;
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Transpose(x) => {
                // out is [.., c, r]; gradient flows back through the inverse swap.
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut dx = vec![0.0; g.len()];
                for b in 0..g.len() / (r * c) {
                    transpose_block(&g[b * r * c..(b + 1) * r * c], &mut dx[b * r * c..(b + 1) * r * c], r, c);
                }
                self.accumulate(grads, x, dx);
            }
            Op::MaskedFill { x, ref mask } => {
                let d = g.iter().zip(mask).map(|(&gv, &m)| if m { 0.0 } else { gv }).collect();
                self.accumulate(grads, x, d);
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `(tanh(inner), d inner / dx)` for the tanh GELU approximation.
fn gelu_parts(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    (inner.tanh(), GELU_C * (1.0 + 3.0 * 0.044715 * x * x))
}

fn transpose_block(src: &[f64], dst: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}

/// `c (+)= op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of shape `[k, n]`.
/// A transposed operand is stored row-major in its transposed shape.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], acc: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given dimensions and strides.
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

/// Numpy-style broadcast of two shapes (aligned at the trailing axis).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape `src`
/// that broadcasts onto it.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + n - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for ax in (0..n).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

/// Sum a gradient of shape `out` down to the broadcast source shape `src`.
fn reduce_to(g: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    let idx = broadcast_index(src, out);
    let mut r = vec![0.0; src.iter().product()];
    for (gv, &i) in g.iter().zip(&idx) {
        r[i] += gv;
    }
    r
}

/// Plain cosine similarity with the same epsilon guard as the graph version.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine length mismatch");
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let su: f64 = u.iter().map(|a| a * a).sum();
    let sv: f64 = v.iter().map(|a| a * a).sum();
    if su.sqrt() < COSINE_EPS || sv.sqrt() < COSINE_EPS {
        log::warn!("cosine similarity of a near-zero vector; using epsilon guard");
    }
    let e2 = COSINE_EPS * COSINE_EPS;
    dot / ((su + e2) * (sv + e2)).sqrt()
}
