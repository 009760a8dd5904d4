//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! a scalar with respect to every leaf that was created with
//! `requires_grad = true`. Nodes that do not depend on such a leaf are never
//! differentiated, so a frozen model costs only its forward pass when an
//! attack optimizes the input.
//!
//! Tensors use NCHW layout for images; "channel" operations act on axis 1 of
//! any tensor with rank ≥ 2, so a `[N, D]` matrix is treated as `D` channels
//! of size one.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::tensor::{col2im, gemm, im2col, ConvGeometry, Tensor};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f32),
    Square(usize),
    Powf(usize, f32),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Relu(usize),
    LeakyRelu(usize, f32),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    ChannelMean(usize),
    SubChannel(usize, usize),
    MulChannel(usize, usize),
    AddChannel(usize, usize),
    Conv2d { x: usize, w: usize, geo: ConvGeometry, batch: usize, cols: Option<Vec<f32>> },
    MaxPool2 { x: usize, argmax: Vec<u32> },
    GlobalAvgPool(usize),
    Upsample2(usize),
    Reshape(usize),
    ConcatCols(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    SumRows(usize),
    Margin { logits: usize, target: Vec<usize>, other: Vec<usize> },
    TotalVariation(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Not `Sync`; build one graph per thread.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when `v` did not influence the
    /// output.
    pub fn take_or_zeros(&mut self, v: Var<'_>) -> Tensor {
        match self.grads.get_mut(v.id).and_then(|g| g.take()) {
            Some(t) => t,
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(output.graph, self), "variable from another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward() needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[output.id].needs_grad {
            return Gradients { grads };
        }
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op on rank-{} tensor", shape.len());
    (shape[0], shape[1], shape[2..].iter().product())
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f32;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            s += e;
        }
        for j in 0..c {
            out[i * c + j] /= s;
        }
    }
    Tensor::new(vec![r, c], out)
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |x, y| x * y));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MulScalar(a, s) => {
            let s = *s;
            accumulate(nodes, grads, *a, g.map(|v| v * s));
        }
        Op::Square(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x)),
        Op::Powf(a, p) => {
            let p = *p;
            accumulate(nodes, grads, *a, g.zip_map(val(*a), |gv, x| gv * p * x.powf(p - 1.0)));
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g.zip_map(out, |gv, y| gv * y)),
        Op::Log(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |gv, x| gv / x)),
        Op::Abs(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |gv, x| gv * x.signum())),
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
        ),
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            accumulate(
                nodes,
                grads,
                *a,
                g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * s }),
            )
        }
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
        Op::Tanh(a) => accumulate(nodes, grads, *a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
        Op::Softplus(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |gv, x| gv * sigmoid(x))),
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let (ar, ac) = (av.rows(), av.cols());
            let (br, bc) = (bv.rows(), bv.cols());
            let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
            let n = if *tb { br } else { bc };
            if nodes[*a].needs_grad {
                // dA = G·op(B)ᵀ, stored in A's orientation.
                let mut da = vec![0.0f32; ar * ac];
                if *ta {
                    // A stored k×m: dA_stored = op(B)·Gᵀ
                    gemm(k, n, m, bv.data(), *tb, g.data(), true, &mut da, 0.0);
                } else {
                    gemm(m, n, k, g.data(), false, bv.data(), !*tb, &mut da, 0.0);
                }
                accumulate(nodes, grads, *a, Tensor::new(vec![ar, ac], da));
            }
            if nodes[*b].needs_grad {
                let mut db = vec![0.0f32; br * bc];
                if *tb {
                    // B stored n×k: dB_stored = Gᵀ·op(A)
                    gemm(n, m, k, g.data(), true, av.data(), *ta, &mut db, 0.0);
                } else {
                    gemm(k, m, n, av.data(), !*ta, g.data(), false, &mut db, 0.0);
                }
                accumulate(nodes, grads, *b, Tensor::new(vec![br, bc], db));
            }
        }
        Op::ChannelMean(a) => {
            let shape = val(*a).shape().to_vec();
            let (n, c, inner) = channel_dims(&shape);
            let scale = 1.0 / (n * inner) as f32;
            let gd = g.data();
            let mut d = vec![0.0f32; n * c * inner];
            for b in 0..n {
                for ch in 0..c {
                    let v = gd[ch] * scale;
                    d[(b * c + ch) * inner..(b * c + ch + 1) * inner].fill(v);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(shape, d));
        }
        Op::SubChannel(x, m) | Op::AddChannel(x, m) => {
            let sign = if matches!(node.op, Op::SubChannel(..)) { -1.0 } else { 1.0 };
            accumulate(nodes, grads, *x, g.clone());
            if nodes[*m].needs_grad {
                let (n, c, inner) = channel_dims(g.shape());
                let mut d = vec![0.0f32; c];
                let gd = g.data();
                for b in 0..n {
                    for (ch, dv) in d.iter_mut().enumerate() {
                        let s: f32 = gd[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().sum();
                        *dv += sign * s;
                    }
                }
                accumulate(nodes, grads, *m, Tensor::new(val(*m).shape().to_vec(), d));
            }
        }
        Op::MulChannel(x, s) => {
            let (n, c, inner) = channel_dims(g.shape());
            let (xv, sv) = (val(*x), val(*s));
            let gd = g.data();
            if nodes[*x].needs_grad {
                let mut d = vec![0.0f32; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let sc = sv.data()[ch];
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        for (dv, gv) in d[r.clone()].iter_mut().zip(&gd[r]) {
                            *dv = gv * sc;
                        }
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            if nodes[*s].needs_grad {
                let mut d = vec![0.0f32; c];
                let xd = xv.data();
                for b in 0..n {
                    for (ch, dv) in d.iter_mut().enumerate() {
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        *dv += gd[r.clone()].iter().zip(&xd[r]).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
                accumulate(nodes, grads, *s, Tensor::new(sv.shape().to_vec(), d));
            }
        }
        Op::Conv2d { x, w, geo, batch, cols } => {
            let wv = val(*w);
            let oc = wv.shape()[0];
            let plane = geo.out_height() * geo.out_width();
            let np = batch * plane;
            // Permute G from [N, OC, P] to [OC, N·P].
            let gd = g.data();
            let mut gm = vec![0.0f32; oc * np];
            for b in 0..*batch {
                for o in 0..oc {
                    gm[o * np + b * plane..o * np + (b + 1) * plane]
                        .copy_from_slice(&gd[(b * oc + o) * plane..(b * oc + o + 1) * plane]);
                }
            }
            if nodes[*w].needs_grad {
                let cols = cols.as_ref().expect("conv columns cached when weights need grad");
                let mut dw = vec![0.0f32; oc * geo.patch_len()];
                gemm(oc, np, geo.patch_len(), &gm, false, cols, true, &mut dw, 0.0);
                accumulate(nodes, grads, *w, Tensor::new(wv.shape().to_vec(), dw));
            }
            if nodes[*x].needs_grad {
                let mut dcols = vec![0.0f32; geo.patch_len() * np];
                gemm(geo.patch_len(), oc, np, wv.data(), true, &gm, false, &mut dcols, 0.0);
                let dx = col2im(&dcols, *batch, geo);
                accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), dx));
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut d = vec![0.0f32; val(*x).len()];
            for (gv, &idx) in g.data().iter().zip(argmax) {
                d[idx as usize] += gv;
            }
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), d));
        }
        Op::GlobalAvgPool(x) => {
            let shape = val(*x).shape().to_vec();
            let (n, c, inner) = channel_dims(&shape);
            let mut d = vec![0.0f32; n * c * inner];
            for i in 0..n * c {
                d[i * inner..(i + 1) * inner].fill(g.data()[i] / inner as f32);
            }
            accumulate(nodes, grads, *x, Tensor::new(shape, d));
        }
        Op::Upsample2(x) => {
            let shape = val(*x).shape().to_vec();
            let (h, w) = (shape[2], shape[3]);
            let planes = shape[0] * shape[1];
            let mut d = vec![0.0f32; planes * h * w];
            let gd = g.data();
            for p in 0..planes {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        d[p * h * w + (y / 2) * w + xx / 2] += gd[p * 4 * h * w + y * 2 * w + xx];
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(shape, d));
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape()));
        }
        Op::ConcatCols(a, b) => {
            let (ca, cb) = (val(*a).cols(), val(*b).cols());
            let r = g.rows();
            let mut da = Vec::with_capacity(r * ca);
            let mut db = Vec::with_capacity(r * cb);
            for i in 0..r {
                let row = g.row(i);
                da.extend_from_slice(&row[..ca]);
                db.extend_from_slice(&row[ca..]);
            }
            accumulate(nodes, grads, *a, Tensor::new(vec![r, ca], da));
            accumulate(nodes, grads, *b, Tensor::new(vec![r, cb], db));
        }
        Op::Softmax(a) => {
            let (r, c) = (out.rows(), out.cols());
            let mut d = vec![0.0f32; r * c];
            for i in 0..r {
                let (y, gr) = (out.row(i), g.row(i));
                let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[i * c + j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(vec![r, c], d));
        }
        Op::LogSoftmax(a) => {
            let (r, c) = (out.rows(), out.cols());
            let mut d = vec![0.0f32; r * c];
            for i in 0..r {
                let (y, gr) = (out.row(i), g.row(i));
                let gs: f32 = gr.iter().sum();
                for j in 0..c {
                    d[i * c + j] = gr[j] - y[j].exp() * gs;
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(vec![r, c], d));
        }
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), gv));
        }
        Op::SumRows(a) => {
            let shape = val(*a).shape().to_vec();
            let inner: usize = shape[1..].iter().product();
            let mut d = vec![0.0f32; shape[0] * inner];
            for (i, gv) in g.data().iter().enumerate() {
                d[i * inner..(i + 1) * inner].fill(*gv);
            }
            accumulate(nodes, grads, *a, Tensor::new(shape, d));
        }
        Op::Margin { logits, target, other } => {
            let lv = val(*logits);
            let c = lv.cols();
            let mut d = vec![0.0f32; lv.len()];
            for (i, gv) in g.data().iter().enumerate() {
                d[i * c + target[i]] += gv;
                d[i * c + other[i]] -= gv;
            }
            accumulate(nodes, grads, *logits, Tensor::new(lv.shape().to_vec(), d));
        }
        Op::TotalVariation(a) => {
            let xv = val(*a);
            let shape = xv.shape();
            let (h, w) = (shape[2], shape[3]);
            let planes = shape[0] * shape[1];
            let gv = g.item();
            let xd = xv.data();
            let mut d = vec![0.0f32; xd.len()];
            for p in 0..planes {
                let base = p * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let i = base + y * w + x;
                        if y + 1 < h {
                            let diff = xd[i + w] - xd[i];
                            d[i + w] += 2.0 * gv * diff;
                            d[i] -= 2.0 * gv * diff;
                        }
                        if x + 1 < w {
                            let diff = xd[i + 1] - xd[i];
                            d[i + 1] += 2.0 * gv * diff;
                            d[i] -= 2.0 * gv * diff;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(shape.to_vec(), d));
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.requires_grad();
        self.graph.push(value, op, needs)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph), "variables from different graphs");
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, needs)
    }

    pub fn add_scalar(self, s: f32) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::MulScalar(self.id, s))
    }

    pub fn square(self) -> Var<'g> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn powf(self, p: f32) -> Var<'g> {
        let v = self.value().map(|x| x.powf(p));
        self.unary(v, Op::Powf(self.id, p))
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(f32::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'g> {
        let v = self.value().map(f32::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn abs(self) -> Var<'g> {
        let v = self.value().map(f32::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'g> {
        let v = self.value().map(|x| if x > 0.0 { x } else { x * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.value().map(f32::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// `ln(1 + eˣ)`, computed stably.
    pub fn softplus(self) -> Var<'g> {
        let v = self
            .value()
            .map(|x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() });
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `ta`/`tb` transpose the stored matrices.
    pub fn matmul_t(self, other: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let (av, bv) = (self.value(), other.value());
        let (m, k) = if ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (k2, n) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", av.shape(), bv.shape());
        let mut c = vec![0.0f32; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut c, 0.0);
        self.binary(
            other,
            Tensor::new(vec![m, n], c),
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    /// Per-channel mean over every axis except 1. Output shape `[C]`.
    pub fn channel_mean(self) -> Var<'g> {
        let xv = self.value();
        let (n, c, inner) = channel_dims(xv.shape());
        let mut m = vec![0.0f64; c];
        let xd = xv.data();
        for b in 0..n {
            for (ch, mv) in m.iter_mut().enumerate() {
                *mv += xd[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
        let denom = (n * inner) as f64;
        let v = Tensor::new(vec![c], m.into_iter().map(|s| (s / denom) as f32).collect());
        self.unary(v, Op::ChannelMean(self.id))
    }

    /// Biased per-channel variance, composed from differentiable primitives.
    pub fn channel_var(self) -> Var<'g> {
        let mean = self.channel_mean();
        self.sub_channel(mean).square().channel_mean()
    }

    fn channel_binary(self, per_channel: Var<'g>, f: impl Fn(f32, f32) -> f32, op: Op) -> Var<'g> {
        let (xv, sv) = (self.value(), per_channel.value());
        let (n, c, inner) = channel_dims(xv.shape());
        assert_eq!(sv.len(), c, "per-channel operand has {} entries for {c} channels", sv.len());
        let mut out = xv.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let s = sv.data()[ch];
                for v in &mut out[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    *v = f(*v, s);
                }
            }
        }
        self.binary(per_channel, Tensor::new(xv.shape().to_vec(), out), op)
    }

    pub fn sub_channel(self, m: Var<'g>) -> Var<'g> {
        let op = Op::SubChannel(self.id, m.id);
        self.channel_binary(m, |x, s| x - s, op)
    }

    pub fn mul_channel(self, s: Var<'g>) -> Var<'g> {
        let op = Op::MulChannel(self.id, s.id);
        self.channel_binary(s, |x, s| x * s, op)
    }

    pub fn add_channel(self, b: Var<'g>) -> Var<'g> {
        let op = Op::AddChannel(self.id, b.id);
        self.channel_binary(b, |x, s| x + s, op)
    }

    /// 2-D convolution without bias. `self` is `[N, C, H, W]`, `weight` is
    /// `[OC, C, K, K]`.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, padding: usize) -> Var<'g> {
        let (xv, wv) = (self.value(), weight.value());
        let xs = xv.shape();
        let ws = wv.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch: {xs:?} vs {ws:?}");
        let geo = ConvGeometry {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        let batch = xs[0];
        let oc = ws[0];
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let plane = oh * ow;
        let np = batch * plane;
        let cols = im2col(xv.data(), batch, &geo);
        let mut om = vec![0.0f32; oc * np];
        gemm(oc, geo.patch_len(), np, wv.data(), false, &cols, false, &mut om, 0.0);
        let mut out = vec![0.0f32; batch * oc * plane];
        for b in 0..batch {
            for o in 0..oc {
                out[(b * oc + o) * plane..(b * oc + o + 1) * plane]
                    .copy_from_slice(&om[o * np + b * plane..o * np + (b + 1) * plane]);
            }
        }
        let keep_cols = weight.requires_grad();
        self.binary(
            weight,
            Tensor::new(vec![batch, oc, oh, ow], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geo,
                batch,
                cols: keep_cols.then_some(cols),
            },
        )
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(self) -> Var<'g> {
        let xv = self.value();
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let cands = [
                        base + 2 * y * w + 2 * x,
                        base + 2 * y * w + 2 * x + 1,
                        base + (2 * y + 1) * w + 2 * x,
                        base + (2 * y + 1) * w + 2 * x + 1,
                    ];
                    let mut best = cands[0];
                    for &c in &cands[1..] {
                        if xd[c] > xd[best] {
                            best = c;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best as u32);
                }
            }
        }
        self.unary(
            Tensor::new(vec![s[0], s[1], oh, ow], out),
            Op::MaxPool2 {
                x: self.id,
                argmax: arg,
            },
        )
    }

    /// Mean over spatial axes: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(self) -> Var<'g> {
        let xv = self.value();
        let (n, c, inner) = channel_dims(xv.shape());
        let xd = xv.data();
        let out: Vec<f32> = (0..n * c)
            .map(|i| xd[i * inner..(i + 1) * inner].iter().sum::<f32>() / inner as f32)
            .collect();
        self.unary(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(self.id))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(self) -> Var<'g> {
        let xv = self.value();
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xd = xv.data();
        let mut out = vec![0.0f32; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + x] = xd[p * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        self.unary(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    /// `[N, A] ‖ [N, B] → [N, A+B]`.
    pub fn concat_cols(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.rows(), b.rows(), "concat_cols row mismatch");
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.rows() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        self.binary(
            other,
            Tensor::new(vec![a.rows(), a.cols() + b.cols()], data),
            Op::ConcatCols(self.id, other.id),
        )
    }

    pub fn softmax(self) -> Var<'g> {
        let v = softmax_rows(&self.value());
        self.unary(v, Op::Softmax(self.id))
    }

    pub fn log_softmax(self) -> Var<'g> {
        let xv = self.value();
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.unary(Tensor::new(vec![r, c], out), Op::LogSoftmax(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Sum over all axes but the first: `[N, ...] → [N]`.
    pub fn sum_rows(self) -> Var<'g> {
        let xv = self.value();
        let n = xv.shape()[0];
        let inner = xv.len() / n.max(1);
        let out: Vec<f32> = (0..n)
            .map(|i| xv.data()[i * inner..(i + 1) * inner].iter().sum())
            .collect();
        self.unary(Tensor::new(vec![n], out), Op::SumRows(self.id))
    }

    /// Per-row `logit[target] − max_{j≠target} logit[j]`.
    pub fn margin(self, targets: &[usize]) -> Var<'g> {
        let lv = self.value();
        let c = lv.cols();
        assert!(c >= 2, "margin needs at least two classes");
        assert_eq!(targets.len(), lv.rows());
        let mut other = Vec::with_capacity(targets.len());
        let mut out = Vec::with_capacity(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let mut best = if t == 0 { 1 } else { 0 };
            for j in 0..c {
                if j != t && row[j] > row[best] {
                    best = j;
                }
            }
            other.push(best);
            out.push(row[t] - row[best]);
        }
        self.unary(
            Tensor::new(vec![targets.len()], out),
            Op::Margin {
                logits: self.id,
                target: targets.to_vec(),
                other,
            },
        )
    }

    /// Sum of squared differences between vertically and horizontally
    /// adjacent pixels of an NCHW batch.
    pub fn total_variation(self) -> Var<'g> {
        let v = Tensor::scalar(total_variation(&self.value()) as f32);
        self.unary(v, Op::TotalVariation(self.id))
    }
}

/// Squared-difference total variation of an NCHW tensor.
pub fn total_variation(x: &Tensor) -> f64 {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let planes = s[0] * s[1];
    let xd = x.data();
    let mut acc = 0.0f64;
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                if y + 1 < h {
                    let d = (xd[i + w] - xd[i]) as f64;
                    acc += d * d;
                }
                if xx + 1 < w {
                    let d = (xd[i + 1] - xd[i]) as f64;
                    acc += d * d;
                }
            }
        }
    }
    acc
}

impl<'g> ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&rhs.value(), |a, b| a + b);
        self.binary(rhs, v, Op::Add(self.id, rhs.id))
    }
}

impl<'g> ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&rhs.value(), |a, b| a - b);
        self.binary(rhs, v, Op::Sub(self.id, rhs.id))
    }
}

impl<'g> ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&rhs.value(), |a, b| a * b);
        self.binary(rhs, v, Op::Mul(self.id, rhs.id))
    }
}

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at `x`, in f64 around an f32 graph.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-2f32;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h as f64)
            })
            .collect()
    }

    fn check(x: Tensor, build: impl for<'g> Fn(Var<'g>) -> Var<'g>) {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let out = build(xv);
        let mut grads = g.backward(out);
        let analytic = grads.take_or_zeros(xv);
        let eval = |t: &Tensor| -> f64 {
            let g = Graph::new();
            build(g.constant(t.clone())).value().item() as f64
        };
        let numeric = numeric_grad(&x, &eval);
        for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let tol = 2e-2 * (1.0 + n.abs());
            assert!(
                ((*a as f64) - n).abs() < tol,
                "grad[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    fn ramp(shape: &[usize], phase: f32) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f32) * 0.731 + phase).sin())
    }

    #[test]
    fn elementwise_gradients() {
        check(ramp(&[2, 3], 0.1), |x| (x * x.sigmoid()).sum());
        check(ramp(&[2, 3], 0.2), |x| x.tanh().square().sum());
        check(ramp(&[2, 3], 0.3), |x| x.softplus().scale(1.5).sum());
        check(ramp(&[2, 3], 0.4), |x| x.leaky_relu(0.2).exp().sum());
        check(ramp(&[2, 3], 0.5).map(|v| v.abs() + 0.5), |x| (x.ln() + x.powf(-0.5)).sum());
        check(ramp(&[2, 3], 0.6), |x| (x - x.add_scalar(2.0).square()).sum());
    }

    #[test]
    fn matmul_gradients_all_orientations() {
        let b = ramp(&[3, 4], 1.0);
        let bt = ramp(&[4, 3], 1.5);
        check(ramp(&[2, 3], 0.0), |x| {
            let bb = x.graph().constant(b.clone());
            x.matmul(bb).square().sum()
        });
        check(ramp(&[3, 2], 0.0), |x| {
            let bb = x.graph().constant(bt.clone());
            x.matmul_t(bb, true, true).square().sum()
        });
        let a = ramp(&[2, 3], 0.7);
        check(ramp(&[4, 3], 0.2), |x| {
            let aa = x.graph().constant(a.clone());
            aa.matmul_t(x, false, true).square().sum()
        });
        check(ramp(&[3, 4], 0.9), |x| {
            let aa = x.graph().constant(a.clone());
            aa.matmul(x).sigmoid().sum()
        });
    }

    #[test]
    fn softmax_family_gradients() {
        let w = ramp(&[3, 4], 2.0);
        check(ramp(&[3, 4], 0.0), |x| {
            let ww = x.graph().constant(w.clone());
            (x.log_softmax() * ww).sum()
        });
        check(ramp(&[3, 4], 0.3), |x| {
            let ww = x.graph().constant(w.clone());
            (x.softmax() * ww).sum()
        });
        check(ramp(&[3, 4], 0.3), |x| x.margin(&[0, 2, 3]).square().sum());
    }

    #[test]
    fn channel_and_batchnorm_gradients() {
        check(ramp(&[2, 3, 2, 2], 0.0), |x| {
            let m = x.channel_mean();
            let var = x.channel_var();
            let inv = var.add_scalar(1e-3).powf(-0.5);
            let y = x.sub_channel(m).mul_channel(inv);
            let w = x.graph().constant(ramp(&[2, 3, 2, 2], 0.8));
            (y * w).sum()
        });
        let s = ramp(&[3], 0.1);
        check(ramp(&[2, 3], 0.0), |x| {
            let ss = x.graph().constant(s.clone());
            x.mul_channel(ss).add_channel(ss).square().sum()
        });
        // gradient with respect to the per-channel operand
        let x0 = ramp(&[2, 3, 2], 0.4);
        check(ramp(&[3], 0.0), |s| {
            let xx = s.graph().constant(x0.clone());
            xx.mul_channel(s).sub_channel(s).square().sum()
        });
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let w = ramp(&[2, 2, 3, 3], 0.3);
        check(ramp(&[2, 2, 5, 5], 0.0), |x| {
            let ww = x.graph().constant(w.clone());
            x.conv2d(ww, 1, 1).max_pool2().square().sum()
        });
        let x0 = ramp(&[2, 2, 5, 4], 0.1);
        check(w.clone(), |w| {
            let xx = w.graph().constant(x0.clone());
            xx.conv2d(w, 2, 1).global_avg_pool().square().sum()
        });
        check(ramp(&[1, 2, 3, 3], 0.0), |x| {
            let k = x.graph().constant(ramp(&[1, 2, 6, 6], 1.1));
            (x.upsample2() * k).sum() + x.total_variation()
        });
    }

    #[test]
    fn reshape_concat_sum_rows_gradients() {
        let y = ramp(&[2, 2], 0.5);
        check(ramp(&[2, 3], 0.0), |x| {
            let yy = x.graph().constant(y.clone());
            x.concat_cols(yy).reshape(&[10]).square().sum()
        });
        check(ramp(&[3, 2, 2], 0.2), |x| x.sum_rows().square().mean());
    }

    #[test]
    fn constants_are_not_differentiated() {
        let g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        let p = g.param(Tensor::scalar(2.0));
        let out = c * p;
        let mut grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.take_or_zeros(p).item(), 3.0);
        assert!(!c.requires_grad());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let g = Graph::new();
        let p = g.param(Tensor::scalar(3.0));
        let out = p * p + p;
        let mut grads = g.backward(out);
        assert_eq!(grads.take_or_zeros(p).item(), 7.0);
    }
}
