use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{gemm_acc_t, reduce_leading, swap_axes, Layout::{Plain, Transposed}};
use super::{axis_extents, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(super) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    SwapAxes(Var, usize, usize),
    Reshape(Var),
    Expand(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout(Var, Vec<T>),
}

pub(super) struct Node<T> {
    pub(super) value: Rc<Tensor<T>>,
    pub(super) op: Op<T>,
    pub(super) requires_grad: bool,
}

/// Records primitive applications for one forward/backward pass.
///
/// A tape is single-threaded: it is built during the forward pass and
/// consumed by [`Tape::backward`].
pub struct Tape<T: Float> {
    pub(super) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(super) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op_inputs(&op).iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// that requires one and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::new();
        leaves.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g,
                });
                continue;
            }
            backprop(&nodes, &mut grads, i, &g);
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::SwapAxes(a, ..)
        | Op::Reshape(a)
        | Op::Expand(a, _)
        | Op::Mean(a, _)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::Softmax(a, _)
        | Op::Dropout(a, _) => vec![*a],
        Op::Slice { x, .. } => vec![*x],
        Op::Concat(xs, _) => xs.clone(),
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn slot<'a, T: Float>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

pub(super) struct MatMulDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_count: usize,
    pub b_count: usize,
    pub out_count: usize,
    pub out_shape: Vec<usize>,
}

pub(super) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = if ab.len() >= bb.len() {
        if !ab.ends_with(bb) {
            return Err(Error::shape("matmul", a, b));
        }
        ab
    } else {
        if !bb.ends_with(ab) {
            return Err(Error::shape("matmul", a, b));
        }
        bb
    };
    let mut out_shape = batch.to_vec();
    out_shape.extend([m, n]);
    Ok(MatMulDims {
        m,
        k,
        n,
        a_count: ab.iter().product(),
        b_count: bb.iter().product(),
        out_count: batch.iter().product(),
        out_shape,
    })
}

fn backprop<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let node = &nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                let len = ga.len();
                reduce_leading(g, len, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let len = gb.len();
                let mut tmp = vec![T::zero(); len];
                reduce_leading(g, len, &mut tmp);
                for (d, t) in gb.iter_mut().zip(tmp) {
                    *d += sign * t;
                }
            }
        }
        Op::Mul(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                let (alen, bd) = (ga.len(), bv.data());
                for (idx, &gv) in g.iter().enumerate() {
                    ga[idx % alen] += gv * bd[idx % bd.len()];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let (blen, ad) = (gb.len(), av.data());
                for (idx, &gv) in g.iter().enumerate() {
                    gb[idx % blen] += gv * ad[idx % ad.len()];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += *s * gv;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Relu(a) => {
            let av = &nodes[a.0].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    if x > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (T::one() - y);
                }
            }
        }
        Op::MatMul(a, b) => matmul_backward(nodes, grads, *a, *b, g),
        Op::SwapAxes(a, x0, x1) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let (_, back) = swap_axes(out.shape(), g, *x0, *x1);
                for (d, v) in ga.iter_mut().zip(back) {
                    *d += v;
                }
            }
        }
        Op::Expand(a, map) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (&src, &gv) in map.iter().zip(g) {
                    ga[src] += gv;
                }
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, total, inner) = axis_extents(out.shape(), *axis);
            let mut offset = 0;
            for x in xs {
                let len = nodes[x.0].value.shape()[*axis];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = nodes[x.0].value.shape().to_vec();
            let (outer, total, inner) = axis_extents(&in_shape, *axis);
            let len = out.shape()[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * total + start) * inner..(o * total + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        Op::Mean(a, axis) => {
            let in_shape = nodes[a.0].value.shape().to_vec();
            let (outer, len, inner) = axis_extents(&in_shape, *axis);
            let scale = T::one() / T::lit(len as f64);
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            ga[(o * len + l) * inner + j] += g[o * inner + j] * scale;
                        }
                    }
                }
            }
        }
        Op::SumAll(a) | Op::MeanAll(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let scale = if matches!(node.op, Op::MeanAll(_)) {
                    T::one() / T::lit(ga.len() as f64)
                } else {
                    T::one()
                };
                let gv = g[0] * scale;
                for d in ga.iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let y = out.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            rstd,
        } => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let gamma = nodes[gain.0].value.data().to_vec();
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (idx, (&gv, &xh)) in g.iter().zip(xhat.iter()).enumerate() {
                    gg[(idx / inner) % len] += gv * xh;
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for (idx, &gv) in g.iter().enumerate() {
                    gb[(idx / inner) % len] += gv;
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = T::lit(len as f64);
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let r = rstd[o * inner + j];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for l in 0..len {
                            let d = g[at(l)] * gamma[l];
                            mean_d += d;
                            mean_dx += d * xhat[at(l)];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for l in 0..len {
                            let d = g[at(l)] * gamma[l];
                            gx[at(l)] += r * (d - mean_d - xhat[at(l)] * mean_dx);
                        }
                    }
                }
            }
        }
        Op::Dropout(a, mask) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
    }
}

fn matmul_backward<T: Float>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: Var,
    b: Var,
    g: &[T],
) {
    let av = Rc::clone(&nodes[a.0].value);
    let bv = Rc::clone(&nodes[b.0].value);
    let dims = matmul_dims(av.shape(), bv.shape()).expect("shapes validated in forward");
    let MatMulDims { m, k, n, .. } = dims;

    let g_mn = |bi: usize| &g[bi * m * n..(bi + 1) * m * n];
    if dims.b_count == 1 {
        // Shared right operand: fold every batch into the row dimension.
        let rows = dims.out_count * m;
        if let Some(ga) = slot(nodes, grads, a) {
            if dims.a_count == dims.out_count {
                gemm_acc_t(g, Plain, bv.data(), Transposed, ga, rows, n, k);
            } else {
                for bi in 0..dims.out_count {
                    let ai = bi % dims.a_count;
                    let ga = &mut ga[ai * m * k..(ai + 1) * m * k];
                    gemm_acc_t(g_mn(bi), Plain, bv.data(), Transposed, ga, m, n, k);
                }
            }
        }
        if let Some(gb) = slot(nodes, grads, b) {
            if dims.a_count == dims.out_count {
                gemm_acc_t(av.data(), Transposed, g, Plain, gb, k, rows, n);
            } else {
                for bi in 0..dims.out_count {
                    let ai = bi % dims.a_count;
                    let a_mk = &av.data()[ai * m * k..(ai + 1) * m * k];
                    gemm_acc_t(a_mk, Transposed, g_mn(bi), Plain, gb, k, m, n);
                }
            }
        }
        return;
    }

    if let Some(ga) = slot(nodes, grads, a) {
        for bi in 0..dims.out_count {
            let (ai, bj) = (bi % dims.a_count, bi % dims.b_count);
            let b_kn = &bv.data()[bj * k * n..(bj + 1) * k * n];
            let ga = &mut ga[ai * m * k..(ai + 1) * m * k];
            gemm_acc_t(g_mn(bi), Plain, b_kn, Transposed, ga, m, n, k);
        }
    }
    if let Some(gb) = slot(nodes, grads, b) {
        for bi in 0..dims.out_count {
            let (ai, bj) = (bi % dims.a_count, bi % dims.b_count);
            let a_mk = &av.data()[ai * m * k..(ai + 1) * m * k];
            let gb = &mut gb[bj * k * n..(bj + 1) * k * n];
            gemm_acc_t(a_mk, Transposed, g_mn(bi), Plain, gb, k, m, n);
        }
    }
}
