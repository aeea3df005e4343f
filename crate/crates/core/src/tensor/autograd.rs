use std::cell::{Cell, Ref, RefCell};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use super::kernels::{gemm_in, MatView};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Additive attention-mask value standing in for negative infinity.
pub const MASK_VALUE: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, shared_rhs: bool, batch: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    MeanAxis { a: usize, axis: usize },
    Sum { a: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    PermuteTokens { a: usize, map: Vec<usize> },
    Softmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    MaskedFill { a: usize },
    L2Normalize { a: usize, norms: Vec<f64> },
    Dropout { a: usize, keep: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of every op executed during one forward pass.
///
/// Tapes are cheap to create and are meant to live for exactly one
/// forward/backward round. They are not `Sync`; concurrent shards each own a
/// tape and reduce gradients explicitly.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<u64>,
    single: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; `None` if `var` is not a
    /// differentiable leaf.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but panics on non-leaf handles.
    pub fn wrt(&self, var: Var<'_>) -> &Tensor {
        self.get(var).expect("gradient requested for a non-differentiable value")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose matrix products (forward and backward) run in single
    /// precision. Every other op stays in f64.
    pub fn single_precision() -> Self {
        Self { single: true, ..Self::default() }
    }

    pub fn is_single_precision(&self) -> bool {
        self.single
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulate operations executed by `matmul` on this tape.
    pub fn matmul_macs(&self) -> u64 {
        self.macs.get()
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads, self.single);
        }

        let mut leaves: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            let leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            leaves.push(leaf.then(|| {
                let shape = node.value.shape().to_vec();
                match grads.get_mut(id).and_then(Option::take) {
                    Some(g) => Tensor { shape, data: g },
                    None => Tensor::zeros(&shape),
                }
            }));
        }
        Ok(Gradients { leaves })
    }
}

fn accum<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &Ref<'_, Vec<Node>>, id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &Ref<'_, Vec<Node>>, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], single: bool) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, shared_rhs, batch, m, k, n } => {
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(ga) = accum(grads, nodes, a) {
                if shared_rhs {
                    gemm_in(single, MatView::new(g, batch * m, n), MatView::new(bv, k, n).t(), ga, 1.0);
                } else {
                    for bi in 0..batch {
                        gemm_in(
                            single,
                            MatView::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            MatView::new(&bv[bi * k * n..(bi + 1) * k * n], k, n).t(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            1.0,
                        );
                    }
                }
            }
            if let Some(gb) = accum(grads, nodes, b) {
                if shared_rhs {
                    gemm_in(single, MatView::new(av, batch * m, k).t(), MatView::new(g, batch * m, n), gb, 1.0);
                } else {
                    for bi in 0..batch {
                        gemm_in(
                            single,
                            MatView::new(&av[bi * m * k..(bi + 1) * m * k], m, k).t(),
                            MatView::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(ga) = accum(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = accum(grads, nodes, b) {
                let bn = gb.len();
                for chunk in g.chunks_exact(bn) {
                    gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(ga) = accum(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(node.value.shape(), *axis);
            let total = node.value.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = val(p).shape()[*axis] * inner;
                if let Some(gp) = accum(grads, nodes, p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        gp[o * width..(o + 1) * width].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += width;
            }
        }
        &Op::Slice { a, axis, start } => {
            let (outer, extent, inner) = axis_split(val(a).shape(), axis);
            let len = node.value.shape()[axis];
            if let Some(ga) = accum(grads, nodes, a) {
                for o in 0..outer {
                    let dst = &mut ga[(o * extent + start) * inner..(o * extent + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        &Op::Transpose { a } => {
            let shape = node.value.shape();
            let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            if let Some(ga) = accum(grads, nodes, a) {
                // output is [.., r, c]; input is [.., c, r]
                for (bi, gblock) in g.chunks_exact(r * c).enumerate() {
                    let dst = &mut ga[bi * r * c..(bi + 1) * r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] += gblock[i * c + j];
                        }
                    }
                }
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = accum(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        &Op::MeanAxis { a, axis } => {
            let (outer, extent, inner) = axis_split(val(a).shape(), axis);
            let inv = 1.0 / extent as f64;
            if let Some(ga) = accum(grads, nodes, a) {
                for o in 0..outer {
                    for e in 0..extent {
                        let dst = &mut ga[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                    }
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = accum(grads, nodes, a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::GatherRows { table, ids } => {
            let width = node.value.shape()[1];
            if let Some(gt) = accum(grads, nodes, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * width..(id + 1) * width];
                    dst.iter_mut().zip(&g[i * width..(i + 1) * width]).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::PermuteTokens { a, map } => {
            let width = node.value.numel() / map.len();
            if let Some(ga) = accum(grads, nodes, *a) {
                for (i, &src) in map.iter().enumerate() {
                    let dst = &mut ga[src * width..(src + 1) * width];
                    dst.iter_mut().zip(&g[i * width..(i + 1) * width]).for_each(|(d, s)| *d += s);
                }
            }
        }
        &Op::Softmax { a } => {
            let y = node.value.data();
            let width = *node.value.shape().last().unwrap();
            if let Some(ga) = accum(grads, nodes, a) {
                for ((yr, gr), dr) in y.chunks_exact(width).zip(g.chunks_exact(width)).zip(ga.chunks_exact_mut(width)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..width {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gam = val(*gamma).data();
            let width = gam.len();
            if let Some(gg) = accum(grads, nodes, *gamma) {
                for (xr, gr) in xhat.chunks_exact(width).zip(g.chunks_exact(width)) {
                    for j in 0..width {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = accum(grads, nodes, *beta) {
                for gr in g.chunks_exact(width) {
                    gb.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                }
            }
            if let Some(gx) = accum(grads, nodes, *x) {
                let inv_n = 1.0 / width as f64;
                let mut dxhat = vec![0.0; width];
                for (row, ((xr, gr), dr)) in
                    xhat.chunks_exact(width).zip(g.chunks_exact(width)).zip(gx.chunks_exact_mut(width)).enumerate()
                {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..width {
                        dxhat[j] = gr[j] * gam[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xr[j];
                    }
                    let s = inv_std[row];
                    for j in 0..width {
                        dr[j] += s * (dxhat[j] - inv_n * sum_d - xr[j] * inv_n * sum_dx);
                    }
                }
            }
        }
        &Op::Gelu { a } => {
            let x = val(a).data();
            if let Some(ga) = accum(grads, nodes, a) {
                let norm = 1.0 / (2.0 * PI).sqrt();
                for ((d, &xv), &gv) in ga.iter_mut().zip(x).zip(g) {
                    let cdf = 0.5 * (1.0 + libm::erf(xv * FRAC_1_SQRT_2));
                    let pdf = norm * (-0.5 * xv * xv).exp();
                    *d += gv * (cdf + xv * pdf);
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let classes = val(*logits).shape()[1];
            let scale = g[0] / targets.len() as f64;
            if let Some(gl) = accum(grads, nodes, *logits) {
                for (i, &t) in targets.iter().enumerate() {
                    let row = &probs[i * classes..(i + 1) * classes];
                    let dst = &mut gl[i * classes..(i + 1) * classes];
                    for j in 0..classes {
                        dst[j] += scale * (row[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        &Op::MaskedFill { a } => {
            if let Some(ga) = accum(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Dropout { a, keep } => {
            if let Some(ga) = accum(grads, nodes, *a) {
                for ((d, s), k) in ga.iter_mut().zip(g).zip(keep) {
                    *d += s * k;
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            let y = node.value.data();
            let width = *node.value.shape().last().unwrap();
            if let Some(ga) = accum(grads, nodes, *a) {
                for (row, ((yr, gr), dr)) in
                    y.chunks_exact(width).zip(g.chunks_exact(width)).zip(ga.chunks_exact_mut(width)).enumerate()
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..width {
                        dr[j] += (gr[j] - yr[j] * dot) / norms[row];
                    }
                }
            }
        }
    }
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("input to {op}")))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    /// Batched matrix product. `self` is `[.., M, K]`; `rhs` is either a
    /// shared `[K, N]` matrix or `[.., K, N]` with the same leading dims.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && sb[..sb.len() - 2] != *lead) {
            return Err(mismatch());
        }
        let single = self.tape.single;
        let mut out = vec![0.0; batch * m * n];
        if shared_rhs {
            gemm_in(single, MatView::new(a.data(), batch * m, k), MatView::new(b.data(), k, n), &mut out, 0.0);
        } else {
            for bi in 0..batch {
                gemm_in(
                    single,
                    MatView::new(&a.data()[bi * m * k..(bi + 1) * m * k], m, k),
                    MatView::new(&b.data()[bi * k * n..(bi + 1) * k * n], k, n),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    0.0,
                );
            }
        }
        self.tape.macs.set(self.tape.macs.get() + (batch * m * k * n) as u64);
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul { a: self.id, b: rhs.id, shared_rhs, batch, m, k, n };
        Ok(self.tape.push(Tensor { shape, data: out }, op, &[self.id, rhs.id]))
    }

    /// Elementwise sum. `rhs` may have a shape equal to a trailing suffix of
    /// `self`'s shape, in which case it is repeated over the leading axes.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_exact_mut(b.numel()) {
            chunk.iter_mut().zip(b.data()).for_each(|(d, s)| *d += s);
        }
        let out = Tensor { shape: sa.to_vec(), data };
        Ok(self.tape.push(out, Op::Add { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * factor);
        Ok(self.tape.push(out, Op::Scale { a: self.id, factor }, &[self.id]))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let s = v.shape();
            let conforms =
                s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !conforms {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
        }
        let (outer, _, inner) = axis_split(base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let width = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Tensor { shape, data }, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("[{start}, {start}+{len}) on axis {axis} of {s:?}")));
        }
        let (outer, extent, inner) = axis_split(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&a.data()[(o * extent + start) * inner..(o * extent + start + len) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.tape.push(Tensor { shape, data }, Op::Slice { a: self.id, axis, start }, &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut data = vec![0.0; a.numel()];
        for (src, dst) in a.data().chunks_exact(r * c).zip(data.chunks_exact_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        Ok(self.tape.push(Tensor { shape, data }, Op::Transpose { a: self.id }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let out = Tensor::new(shape.to_vec(), a.data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", a.shape())))?;
        Ok(self.tape.push(out, Op::Reshape { a: self.id }, &[self.id]))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {s:?}")));
        }
        let (outer, extent, inner) = axis_split(s, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &a.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                data[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / extent as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s.to_vec();
        shape.remove(axis);
        Ok(self.tape.push(Tensor { shape, data }, Op::MeanAxis { a: self.id, axis }, &[self.id]))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        Ok(self.tape.push(Tensor::scalar(total), Op::Sum { a: self.id }, &[self.id]))
    }

    /// Row lookup into a `[rows, width]` table (embedding lookup). Rows may
    /// repeat; their gradients accumulate.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be rank 2, got {s:?}")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("gather_rows id {bad} >= table rows {rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let out = Tensor { shape: vec![ids.len(), width], data };
        Ok(self.tape.push(out, Op::GatherRows { table: self.id, ids: ids.to_vec() }, &[self.id]))
    }

    /// Reorders slices along axis 0: output row `i` is input row `map[i]`.
    /// `map` must be a permutation.
    pub fn permute_tokens(self, map: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let rows = a.shape()[0];
        if map.len() != rows {
            return Err(Error::shape("permute_tokens", format!("map of {} for {rows} rows", map.len())));
        }
        let mut seen = vec![false; rows];
        for &src in map {
            if src >= rows || std::mem::replace(&mut seen[src], true) {
                return Err(Error::Contract("permute_tokens map is not a bijection".into()));
            }
        }
        let width = a.numel() / rows;
        let mut data = Vec::with_capacity(a.numel());
        for &src in map {
            data.extend_from_slice(&a.data()[src * width..(src + 1) * width]);
        }
        let out = Tensor { shape: a.shape().to_vec(), data };
        Ok(self.tape.push(out, Op::PermuteTokens { a: self.id, map: map.to_vec() }, &[self.id]))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        check_finite("softmax", &a)?;
        let width = *a.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor { shape: a.shape().to_vec(), data };
        Ok(self.tape.push(out, Op::Softmax { a: self.id }, &[self.id]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let width = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if gm.shape() != [width] || bt.shape() != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gm.shape(), bt.shape()),
            ));
        }
        let rows = x.numel() / width;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * width..(r + 1) * width];
            let mean = xr.iter().sum::<f64>() / width as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = s;
            for j in 0..width {
                let h = (xr[j] - mean) * s;
                xhat[r * width + j] = h;
                data[r * width + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        let out = Tensor { shape: x.shape().to_vec(), data };
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std };
        Ok(self.tape.push(out, op, &[self.id, gamma.id, beta.id]))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(self) -> Result<Var<'t>> {
        let out = self.value().map(|x| 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)));
        Ok(self.tape.push(out, Op::Gelu { a: self.id }, &[self.id]))
    }

    /// Mean cross-entropy of `[N, C]` logits against class targets.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", format!("logits {s:?} for {} targets", targets.len())));
        }
        check_finite("cross_entropy", &a)?;
        let classes = s[1];
        if let Some(bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Contract(format!("target {bad} >= {classes} classes")));
        }
        let mut probs = vec![0.0; a.numel()];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &a.data()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            for j in 0..classes {
                probs[i * classes + j] = (row[j] - lse).exp();
            }
        }
        let loss = Tensor::scalar(total / targets.len() as f64);
        let op = Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs };
        Ok(self.tape.push(loss, op, &[self.id]))
    }

    /// Adds [`MASK_VALUE`] to every score whose key is masked. `self` is
    /// `[N, Tq, Tk]` (or `[Tq, Tk]`, with `N = 1`); `key_mask` has `N * Tk`
    /// entries, `true` marking keys to suppress.
    pub fn masked_fill(self, key_mask: &[bool]) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() < 2 {
            return Err(Error::shape("masked_fill", format!("rank {} < 2", s.len())));
        }
        let (tq, tk) = (s[s.len() - 2], s[s.len() - 1]);
        let n = a.numel() / (tq * tk);
        if key_mask.len() != n * tk {
            return Err(Error::shape("masked_fill", format!("mask of {} for scores {s:?}", key_mask.len())));
        }
        let mut data = a.data().to_vec();
        for (b, block) in data.chunks_exact_mut(tq * tk).enumerate() {
            let mask = &key_mask[b * tk..(b + 1) * tk];
            for row in block.chunks_exact_mut(tk) {
                for (v, &m) in row.iter_mut().zip(mask) {
                    if m {
                        *v += MASK_VALUE;
                    }
                }
            }
        }
        let out = Tensor { shape: s.to_vec(), data };
        Ok(self.tape.push(out, Op::MaskedFill { a: self.id }, &[self.id]))
    }

    /// Scales each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let a = self.value();
        let width = *a.shape().last().ok_or_else(|| Error::shape("l2_normalize", "scalar input"))?;
        let mut data = a.data().to_vec();
        let mut norms = Vec::with_capacity(a.numel() / width);
        for row in data.chunks_exact_mut(width) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::NonFinite("l2_normalize of zero or non-finite vector".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let out = Tensor { shape: a.shape().to_vec(), data };
        Ok(self.tape.push(out, Op::L2Normalize { a: self.id, norms }, &[self.id]))
    }
}

impl<'t> Var<'t> {
    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout(self, p: f64, rng: &mut crate::rng::SplitMix64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        let a = self.value();
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..a.numel()).map(|_| if rng.bernoulli(p) { 0.0 } else { scale }).collect();
        let data = a.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor { shape: a.shape().to_vec(), data };
        Ok(self.tape.push(out, Op::Dropout { a: self.id, keep }, &[self.id]))
    }
}
