//! Tape-based reverse-mode differentiation.
//!
//! Every op on a [`Var`] appends a node to its [`Graph`]. Nodes are stored in
//! creation order, which is already a topological order, so the backward pass
//! is a single reverse sweep. A graph is rebuilt for every training step.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use super::array::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape};
use super::conv::{col2im, conv_out_len, im2col};
use super::{Real, Tensor, TensorError};

pub type NodeId = usize;

/// A linear operator with an explicit adjoint, recorded as one graph node.
///
/// Used for the STFT and inverse STFT so they participate in autodiff without
/// being decomposed into elementwise ops.
pub trait LinearMap<R: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, input: &Tensor<R>) -> Result<Tensor<R>, TensorError>;
    /// Adjoint applied to `grad` (shaped like the output); returns a buffer
    /// shaped like `input_shape`.
    fn adjoint(&self, grad: &Tensor<R>, input_shape: &[usize]) -> Result<Vec<R>, TensorError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Relu,
    Silu,
    Softplus,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
            Unary::Relu => "relu",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Square => "square",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

enum Op<R: Real> {
    Leaf,
    Unary { x: NodeId, kind: Unary },
    Binary { a: NodeId, b: NodeId, kind: Binary },
    Scale { x: NodeId, factor: R },
    AddScalar { x: NodeId },
    Pow { x: NodeId, exponent: R },
    MatMul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    Reshape { x: NodeId },
    Slice { x: NodeId, axis: usize, start: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
    PadEnd2d { x: NodeId },
    Upsample2x { x: NodeId },
    ComplexMul { a: NodeId, b: NodeId },
    ComplexAbs { x: NodeId },
    Linear { x: NodeId, map: Arc<dyn LinearMap<R>> },
}

impl<R: Real> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { kind, .. } => kind.name(),
            Op::Binary { kind, .. } => kind.name(),
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Pow { .. } => "pow",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Reshape { .. } => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::PadEnd2d { .. } => "pad2d",
            Op::Upsample2x { .. } => "upsample2x",
            Op::ComplexMul { .. } => "complex_mul",
            Op::ComplexAbs { .. } => "complex_abs",
            Op::Linear { map, .. } => map.name(),
        }
    }
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// The recording tape. Confined to one thread.
pub struct Graph<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
    consumed: Cell<bool>,
    finite_check: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            finite_check: false,
        }
    }

    /// A graph that rejects non-finite leaves and op outputs.
    pub fn with_finite_check() -> Self {
        Self {
            finite_check: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<R>) -> Result<Var<'_, R>, TensorError> {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn param(&self, value: Tensor<R>) -> Result<Var<'_, R>, TensorError> {
        self.leaf(value, true)
    }

    fn leaf(&self, value: Tensor<R>, requires_grad: bool) -> Result<Var<'_, R>, TensorError> {
        if self.finite_check && !value.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    fn push(&self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor<R>, op: Op<R>, inputs: &[NodeId]) -> Result<Var<'_, R>, TensorError> {
        if self.finite_check && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        // Ops without a differentiable input are stored as plain values.
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(value, op, requires_grad))
    }

    fn value(&self, id: NodeId) -> Tensor<R> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>, TensorError> {
        let grads = self.backward_retain(loss)?;
        self.consumed.set(true);
        Ok(grads)
    }

    /// Reverse sweep that leaves the graph usable for another backward pass.
    pub fn backward_retain(&self, loss: Var<'_, R>) -> Result<Gradients<R>, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::GraphConsumed);
        }
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to a different graph");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; nodes.len()];
        let mut kept: Vec<Option<Vec<R>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![R::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                kept[id] = Some(g);
                continue;
            }
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            backprop_node(&nodes, node, &g, &mut grads)?;
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: kept, shapes })
    }
}

impl<R: Real> fmt::Debug for Graph<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Gradients of leaves that required grad, keyed by their [`Var`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// `None` when the leaf does not require grad or the loss does not depend on it.
    pub fn get(&self, var: Var<'_, R>) -> Option<Tensor<R>> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<Tensor<R>> {
        self.grads
            .get(id)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[id].clone(), g.clone()))
    }

    /// Gradient, or zeros of the leaf's shape when no gradient reached it.
    pub fn get_or_zeros(&self, var: Var<'_, R>) -> Tensor<R> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

fn accumulate<R: Real>(
    nodes: &[Node<R>],
    grads: &mut [Option<Vec<R>>],
    id: NodeId,
    contribution: Vec<R>,
    op: &'static str,
) -> Result<(), TensorError> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    if contribution.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFiniteGradient { op });
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
    Ok(())
}

fn backprop_node<R: Real>(
    nodes: &[Node<R>],
    node: &Node<R>,
    g: &Tensor<R>,
    grads: &mut [Option<Vec<R>>],
) -> Result<(), TensorError> {
    let name = node.op.name();
    let gd = g.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            let xv = nodes[*x].value.data();
            let out: Vec<R> = match kind {
                Unary::Neg => gd.iter().map(|&g| -g).collect(),
                Unary::Exp => gd.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                Unary::Log => gd.iter().zip(xv).map(|(&g, &x)| g / x).collect(),
                Unary::Sqrt => {
                    let half = R::lit(0.5);
                    gd.iter().zip(y).map(|(&g, &y)| g * half / y).collect()
                }
                Unary::Abs => gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > R::zero() { g } else if x < R::zero() { -g } else { R::zero() })
                    .collect(),
                Unary::Relu => gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > R::zero() { g } else { R::zero() })
                    .collect(),
                Unary::Silu => gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (R::one() + x * (R::one() - s))
                    })
                    .collect(),
                Unary::Softplus => gd.iter().zip(xv).map(|(&g, &x)| g * sigmoid(x)).collect(),
                Unary::Square => {
                    let two = R::lit(2.0);
                    gd.iter().zip(xv).map(|(&g, &x)| g * two * x).collect()
                }
            };
            accumulate(nodes, grads, *x, out, name)?;
        }
        Op::Binary { a, b, kind } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let out_shape = node.value.shape();
            let sa = broadcast_strides(av.shape(), out_shape);
            let sb = broadcast_strides(bv.shape(), out_shape);
            let need_a = nodes[*a].requires_grad;
            let need_b = nodes[*b].requires_grad;
            match kind {
                Binary::Add | Binary::Sub => {
                    if need_a {
                        let ga = reduce_to_shape(gd, out_shape, av.shape());
                        accumulate(nodes, grads, *a, ga, name)?;
                    }
                    if need_b {
                        let mut gb = reduce_to_shape(gd, out_shape, bv.shape());
                        if *kind == Binary::Sub {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(nodes, grads, *b, gb, name)?;
                    }
                }
                Binary::Mul | Binary::Div => {
                    let (ad, bd) = (av.data(), bv.data());
                    let mut ga = vec![R::zero(); if need_a { ad.len() } else { 0 }];
                    let mut gb = vec![R::zero(); if need_b { bd.len() } else { 0 }];
                    let div = *kind == Binary::Div;
                    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                        let (x, z) = (ad[ia], bd[ib]);
                        if div {
                            if need_a {
                                ga[ia] += gd[o] / z;
                            }
                            if need_b {
                                gb[ib] -= gd[o] * x / (z * z);
                            }
                        } else {
                            if need_a {
                                ga[ia] += gd[o] * z;
                            }
                            if need_b {
                                gb[ib] += gd[o] * x;
                            }
                        }
                    });
                    if need_a {
                        accumulate(nodes, grads, *a, ga, name)?;
                    }
                    if need_b {
                        accumulate(nodes, grads, *b, gb, name)?;
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            let out = gd.iter().map(|&g| g * *factor).collect();
            accumulate(nodes, grads, *x, out, name)?;
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            accumulate(nodes, grads, *x, gd.to_vec(), name)?;
        }
        Op::Pow { x, exponent } => {
            let xv = nodes[*x].value.data();
            let e1 = *exponent - R::one();
            let out = gd
                .iter()
                .zip(xv)
                .map(|(&g, &x)| g * *exponent * x.powf(e1))
                .collect();
            accumulate(nodes, grads, *x, out, name)?;
        }
        Op::MatMul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].requires_grad {
                let mut ga = vec![R::zero(); m * k];
                R::gemm(m, n, k, R::one(), gd, false, bv.data(), true, R::zero(), &mut ga);
                accumulate(nodes, grads, *a, ga, name)?;
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![R::zero(); k * n];
                R::gemm(k, m, n, R::one(), av.data(), true, gd, false, R::zero(), &mut gb);
                accumulate(nodes, grads, *b, gb, name)?;
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (bsz, cin, h, wd) = dims4(xv.shape());
            let (cout, _, kh, kw) = dims4(wv.shape());
            let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
            let kdim = cin * kh * kw;
            let plane = ho * wo;
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            let mut gx = vec![R::zero(); if need_x { xv.len() } else { 0 }];
            let mut gw = vec![R::zero(); if need_w { wv.len() } else { 0 }];
            let mut cols = vec![R::zero(); kdim * plane];
            let mut dcols = vec![R::zero(); if need_x { kdim * plane } else { 0 }];
            for bi in 0..bsz {
                let gb = &gd[bi * cout * plane..(bi + 1) * cout * plane];
                if need_w {
                    let xb = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    im2col(xb, cin, h, wd, kh, kw, *stride, *pad, ho, wo, &mut cols);
                    R::gemm(cout, plane, kdim, R::one(), gb, false, &cols, true, R::one(), &mut gw);
                }
                if need_x {
                    R::gemm(kdim, cout, plane, R::one(), wv.data(), true, gb, false, R::zero(), &mut dcols);
                    let gxb = &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    col2im(&dcols, cin, h, wd, kh, kw, *stride, *pad, ho, wo, gxb);
                }
            }
            if need_x {
                accumulate(nodes, grads, *x, gx, name)?;
            }
            if need_w {
                accumulate(nodes, grads, *w, gw, name)?;
            }
            if let Some(bid) = bias {
                if nodes[*bid].requires_grad {
                    let mut gbias = vec![R::zero(); cout];
                    for bi in 0..bsz {
                        for (co, acc) in gbias.iter_mut().enumerate() {
                            let off = (bi * cout + co) * plane;
                            *acc += gd[off..off + plane].iter().copied().sum::<R>();
                        }
                    }
                    accumulate(nodes, grads, *bid, gbias, name)?;
                }
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, inner) = split_axis(xs, *axis);
            let len_in = xs[*axis];
            let len_out = node.value.shape()[*axis];
            let mut gx = vec![R::zero(); nodes[*x].value.len()];
            for o in 0..outer {
                let src = &gd[o * len_out * inner..(o + 1) * len_out * inner];
                let dst_off = (o * len_in + start) * inner;
                gx[dst_off..dst_off + len_out * inner].copy_from_slice(src);
            }
            accumulate(nodes, grads, *x, gx, name)?;
        }
        Op::Concat { xs, axis } => {
            let out_shape = node.value.shape();
            let (outer, inner) = split_axis(out_shape, *axis);
            let total = out_shape[*axis];
            let mut offset = 0;
            for &xi in xs {
                let len = nodes[xi].value.shape()[*axis];
                if nodes[xi].requires_grad {
                    let mut gx = Vec::with_capacity(nodes[xi].value.len());
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gx.extend_from_slice(&gd[s..s + len * inner]);
                    }
                    accumulate(nodes, grads, xi, gx, name)?;
                }
                offset += len;
            }
        }
        Op::Sum { x } => {
            let n = nodes[*x].value.len();
            accumulate(nodes, grads, *x, vec![gd[0]; n], name)?;
        }
        Op::Mean { x } => {
            let n = nodes[*x].value.len();
            let v = gd[0] / R::lit(n as f64);
            accumulate(nodes, grads, *x, vec![v; n], name)?;
        }
        Op::PadEnd2d { x } => {
            let (b, c, h, w) = dims4(nodes[*x].value.shape());
            let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
            let mut gx = Vec::with_capacity(b * c * h * w);
            for plane in 0..b * c {
                for r in 0..h {
                    let s = (plane * ho + r) * wo;
                    gx.extend_from_slice(&gd[s..s + w]);
                }
            }
            accumulate(nodes, grads, *x, gx, name)?;
        }
        Op::Upsample2x { x } => {
            let (b, c, h, w) = dims4(nodes[*x].value.shape());
            let wo = 2 * w;
            let mut gx = vec![R::zero(); b * c * h * w];
            for plane in 0..b * c {
                for r in 0..h {
                    for col in 0..w {
                        let base = (plane * 2 * h + 2 * r) * wo + 2 * col;
                        gx[(plane * h + r) * w + col] =
                            gd[base] + gd[base + 1] + gd[base + wo] + gd[base + wo + 1];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx, name)?;
        }
        Op::ComplexMul { a, b } => {
            let ad = nodes[*a].value.data();
            let bd = nodes[*b].value.data();
            let (pairs, inner) = pair_layout(node.value.shape());
            let mut ga = vec![R::zero(); ad.len()];
            let mut gb = vec![R::zero(); bd.len()];
            for p in 0..pairs {
                let re = 2 * p * inner;
                let im = re + inner;
                for j in 0..inner {
                    let (gr, gi) = (gd[re + j], gd[im + j]);
                    let (ar, ai) = (ad[re + j], ad[im + j]);
                    let (br, bi) = (bd[re + j], bd[im + j]);
                    ga[re + j] = gr * br + gi * bi;
                    ga[im + j] = gi * br - gr * bi;
                    gb[re + j] = gr * ar + gi * ai;
                    gb[im + j] = gi * ar - gr * ai;
                }
            }
            accumulate(nodes, grads, *a, ga, name)?;
            accumulate(nodes, grads, *b, gb, name)?;
        }
        Op::ComplexAbs { x } => {
            let xd = nodes[*x].value.data();
            let (pairs, inner) = pair_layout(nodes[*x].value.shape());
            let mut gx = vec![R::zero(); xd.len()];
            for p in 0..pairs {
                let re = 2 * p * inner;
                let im = re + inner;
                for j in 0..inner {
                    let m = y[p * inner + j];
                    let go = gd[p * inner + j];
                    gx[re + j] = go * xd[re + j] / m;
                    gx[im + j] = go * xd[im + j] / m;
                }
            }
            accumulate(nodes, grads, *x, gx, name)?;
        }
        Op::Linear { x, map } => {
            let gx = map.adjoint(g, nodes[*x].value.shape())?;
            accumulate(nodes, grads, *x, gx, name)?;
        }
    }
    Ok(())
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    // exp overflow gives 1/inf = 0, which is the correct limit
    R::one() / (R::one() + (-x).exp())
}

#[inline]
fn softplus<R: Real>(x: R) -> R {
    // log(1 + e^x) without overflow
    x.max(R::zero()) + (R::one() + (-x.abs()).exp()).ln()
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// `(number of complex planes, elements per plane)` for `[B, 2C, ...]` layouts.
fn pair_layout(shape: &[usize]) -> (usize, usize) {
    let pairs = shape[0] * shape[1] / 2;
    let inner = shape[2..].iter().product();
    (pairs, inner)
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, R: Real> {
    graph: &'g Graph<R>,
    id: NodeId,
}

impl<R: Real> fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'g, R: Real> Var<'g, R> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<R> {
        self.graph
    }

    pub fn value(&self) -> Tensor<R> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn same_graph(&self, other: &Var<'g, R>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn unary(self, kind: Unary, f: impl Fn(R) -> R) -> Result<Self, TensorError> {
        let out = self.value().map(f);
        self.graph.record(out, Op::Unary { x: self.id, kind }, &[self.id])
    }

    fn binary(self, other: Self, kind: Binary) -> Result<Self, TensorError> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(kind.name(), a.shape(), b.shape())?;
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let mut out = vec![R::zero(); n];
        let (ad, bd) = (a.data(), b.data());
        if a.shape() == b.shape() {
            for (o, (&x, &y)) in out.iter_mut().zip(ad.iter().zip(bd)) {
                *o = apply_binary(kind, x, y);
            }
        } else {
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = apply_binary(kind, ad[ia], bd[ib]);
            });
        }
        self.graph.record(
            Tensor::from_parts(out_shape, out),
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
            },
            &[self.id, other.id],
        )
    }

    pub fn add(self, other: Self) -> Result<Self, TensorError> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Self) -> Result<Self, TensorError> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Self) -> Result<Self, TensorError> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Self) -> Result<Self, TensorError> {
        self.binary(other, Binary::Div)
    }

    pub fn neg(self) -> Result<Self, TensorError> {
        self.unary(Unary::Neg, |x| -x)
    }

    pub fn exp(self) -> Result<Self, TensorError> {
        self.unary(Unary::Exp, |x| x.exp())
    }

    pub fn log(self) -> Result<Self, TensorError> {
        self.unary(Unary::Log, |x| x.ln())
    }

    pub fn sqrt(self) -> Result<Self, TensorError> {
        self.unary(Unary::Sqrt, |x| x.sqrt())
    }

    pub fn abs(self) -> Result<Self, TensorError> {
        self.unary(Unary::Abs, |x| x.abs())
    }

    pub fn relu(self) -> Result<Self, TensorError> {
        self.unary(Unary::Relu, |x| x.max(R::zero()))
    }

    pub fn silu(self) -> Result<Self, TensorError> {
        self.unary(Unary::Silu, |x| x * sigmoid(x))
    }

    pub fn softplus(self) -> Result<Self, TensorError> {
        self.unary(Unary::Softplus, softplus)
    }

    pub fn square(self) -> Result<Self, TensorError> {
        self.unary(Unary::Square, |x| x * x)
    }

    pub fn scale(self, factor: R) -> Result<Self, TensorError> {
        let out = self.value().map(|x| x * factor);
        self.graph.record(out, Op::Scale { x: self.id, factor }, &[self.id])
    }

    pub fn add_scalar(self, c: R) -> Result<Self, TensorError> {
        let out = self.value().map(|x| x + c);
        self.graph.record(out, Op::AddScalar { x: self.id }, &[self.id])
    }

    pub fn pow(self, exponent: R) -> Result<Self, TensorError> {
        let out = self.value().map(|x| x.powf(exponent));
        self.graph.record(out, Op::Pow { x: self.id, exponent }, &[self.id])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Self) -> Result<Self, TensorError> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![R::zero(); m * n];
        R::gemm(m, k, n, R::one(), a.data(), false, b.data(), false, R::zero(), &mut out);
        self.graph.record(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        )
    }

    /// 2-D convolution. `self`: `[B, Cin, H, W]`, `weight`: `[Cout, Cin, kh, kw]`,
    /// `bias`: `[Cout]`. Zero padding of `pad` on every side.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize) -> Result<Self, TensorError> {
        self.same_graph(&weight);
        let x = self.value();
        let w = weight.value();
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] || stride == 0 {
            return Err(mismatch());
        }
        let (bsz, cin, h, wd) = dims4(x.shape());
        let (cout, _, kh, kw) = dims4(w.shape());
        let ho = conv_out_len(h, kh, stride, pad).ok_or_else(mismatch)?;
        let wo = conv_out_len(wd, kw, stride, pad).ok_or_else(mismatch)?;
        let bias_val = match bias {
            Some(b) => {
                self.same_graph(&b);
                let bv = b.value();
                if bv.shape() != [cout] {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: bv.shape().to_vec(),
                        rhs: vec![cout],
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let kdim = cin * kh * kw;
        let plane = ho * wo;
        let mut out = vec![R::zero(); bsz * cout * plane];
        let mut cols = vec![R::zero(); kdim * plane];
        for bi in 0..bsz {
            let xb = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let ob = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
            if let Some(bv) = &bias_val {
                for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                    chunk.fill(bv.data()[co]);
                }
            }
            im2col(xb, cin, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
            R::gemm(cout, kdim, plane, R::one(), w.data(), false, &cols, false, R::one(), ob);
        }
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        self.graph.record(
            Tensor::from_parts(vec![bsz, cout, ho, wo], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// 1-D convolution. `self`: `[B, Cin, L]`, `weight`: `[Cout, Cin, k]`.
    pub fn conv1d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize) -> Result<Self, TensorError> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        // Treated as a height-1 image; only the width is padded.
        let x4 = self.reshape(&[xs[0], xs[1], 1, xs[2]])?;
        let x4 = x4.pad_width_both(pad)?;
        let w4 = weight.reshape(&[ws[0], ws[1], 1, ws[2]])?;
        let y = x4.conv2d(w4, bias, stride, 0)?;
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1], ys[3]])
    }

    fn pad_width_both(self, pad: usize) -> Result<Self, TensorError> {
        if pad == 0 {
            return Ok(self);
        }
        let s = self.shape();
        let zeros = self.graph.constant(Tensor::zeros(&[s[0], s[1], s[2], pad]))?;
        Var::concat(&[zeros, self, zeros], 3)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        let out = self.value().reshape(shape)?;
        self.graph.record(out, Op::Reshape { x: self.id }, &[self.id])
    }

    /// `len` elements of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self, TensorError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "slice axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, inner) = split_axis(shape, axis);
        let len_in = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * len_in + start) * inner;
            out.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.graph.record(
            Tensor::from_parts(out_shape, out),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    pub fn concat(xs: &[Self], axis: usize) -> Result<Self, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let vals: Vec<Tensor<R>> = xs.iter().map(|x| x.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in &vals {
            first.same_graph(&xs[0]);
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis];
                let s = o * len * inner;
                out.extend_from_slice(&v.data()[s..s + len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let ids: Vec<NodeId> = xs.iter().map(|x| x.id).collect();
        first.graph.record(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                xs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    pub fn sum(self) -> Result<Self, TensorError> {
        let s = self.value().sum_all();
        self.graph.record(Tensor::scalar(s), Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(self) -> Result<Self, TensorError> {
        let v = self.value();
        if v.is_empty() {
            return Err(TensorError::InvalidArgument("mean of empty tensor".into()));
        }
        let m = v.sum_all() / R::lit(v.len() as f64);
        self.graph.record(Tensor::scalar(m), Op::Mean { x: self.id }, &[self.id])
    }

    /// Zero-pads the last two axes of a `[B, C, H, W]` tensor at their ends.
    pub fn pad_end_2d(self, extra_h: usize, extra_w: usize) -> Result<Self, TensorError> {
        let v = self.value();
        if v.rank() != 4 {
            return Err(TensorError::InvalidArgument(format!("pad_end_2d needs rank 4, got {:?}", v.shape())));
        }
        if extra_h == 0 && extra_w == 0 {
            return Ok(self);
        }
        let (b, c, h, w) = dims4(v.shape());
        let (ho, wo) = (h + extra_h, w + extra_w);
        let mut out = vec![R::zero(); b * c * ho * wo];
        for plane in 0..b * c {
            for r in 0..h {
                let s = (plane * h + r) * w;
                let d = (plane * ho + r) * wo;
                out[d..d + w].copy_from_slice(&v.data()[s..s + w]);
            }
        }
        self.graph.record(
            Tensor::from_parts(vec![b, c, ho, wo], out),
            Op::PadEnd2d { x: self.id },
            &[self.id],
        )
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample2x(self) -> Result<Self, TensorError> {
        let v = self.value();
        if v.rank() != 4 {
            return Err(TensorError::InvalidArgument(format!("upsample2x needs rank 4, got {:?}", v.shape())));
        }
        let (b, c, h, w) = dims4(v.shape());
        let wo = 2 * w;
        let mut out = vec![R::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            for r in 0..h {
                for col in 0..w {
                    let x = v.data()[(plane * h + r) * w + col];
                    let base = (plane * 2 * h + 2 * r) * wo + 2 * col;
                    out[base] = x;
                    out[base + 1] = x;
                    out[base + wo] = x;
                    out[base + wo + 1] = x;
                }
            }
        }
        self.graph.record(
            Tensor::from_parts(vec![b, c, 2 * h, wo], out),
            Op::Upsample2x { x: self.id },
            &[self.id],
        )
    }

    /// Complex product of `[B, 2C, ...]` tensors whose channel pairs hold
    /// (real, imaginary) parts.
    pub fn complex_mul(self, other: Self) -> Result<Self, TensorError> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || a.rank() < 2 || a.shape()[1] % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "complex_mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (pairs, inner) = pair_layout(a.shape());
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![R::zero(); a.len()];
        for p in 0..pairs {
            let re = 2 * p * inner;
            let im = re + inner;
            for j in 0..inner {
                let (ar, ai, br, bi) = (ad[re + j], ad[im + j], bd[re + j], bd[im + j]);
                out[re + j] = ar * br - ai * bi;
                out[im + j] = ar * bi + ai * br;
            }
        }
        self.graph.record(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::ComplexMul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        )
    }

    /// `sqrt(re^2 + im^2 + eps)` per channel pair: `[B, 2C, ...] -> [B, C, ...]`.
    pub fn complex_abs(self, eps: R) -> Result<Self, TensorError> {
        let a = self.value();
        if a.rank() < 2 || a.shape()[1] % 2 != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "complex_abs needs an even channel axis, got {:?}",
                a.shape()
            )));
        }
        let (pairs, inner) = pair_layout(a.shape());
        let d = a.data();
        let mut out = Vec::with_capacity(pairs * inner);
        for p in 0..pairs {
            let re = 2 * p * inner;
            let im = re + inner;
            for j in 0..inner {
                out.push((d[re + j] * d[re + j] + d[im + j] * d[im + j] + eps).sqrt());
            }
        }
        let mut shape = a.shape().to_vec();
        shape[1] /= 2;
        self.graph.record(
            Tensor::from_parts(shape, out),
            Op::ComplexAbs { x: self.id },
            &[self.id],
        )
    }

    /// Applies a linear operator with a known adjoint.
    pub fn linear_map(self, map: Arc<dyn LinearMap<R>>) -> Result<Self, TensorError> {
        let out = map.apply(&self.value())?;
        self.graph.record(out, Op::Linear { x: self.id, map }, &[self.id])
    }

    /// Same values, detached from gradient flow.
    pub fn stop_grad(self) -> Result<Self, TensorError> {
        self.graph.constant(self.value())
    }
}

#[inline]
fn apply_binary<R: Real>(kind: Binary, x: R, y: R) -> R {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    }
}
