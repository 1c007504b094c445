//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and whatever it needs for the backward pass, so nodes are always in
//! topological order. A fresh graph is built for every forward pass.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rustfft::num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::objectives::fft::fft2_inplace;
use crate::priors::{channel_extremum, PriorWindow};
use crate::tensor::{self, Padding, Shape, Tensor};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Op {
    Leaf,
    Constant,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: Padding,
    },
    DwConv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        padding: Padding,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    Silu(usize),
    Sigmoid(usize),
    Abs(usize),
    Sqrt(usize),
    Gap(usize),
    ChannelMean(usize),
    LayerNorm {
        x: usize,
        scale: usize,
        shift: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Up2(usize),
    Down2(usize),
    Concat(Vec<usize>),
    Narrow {
        x: usize,
        start: usize,
    },
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    Fft2(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar with respect to every parameter leaf of a graph.
pub struct Gradients {
    graph: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached { index: v.index });
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Registers a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// Forward value of `v`.
    ///
    /// Panics if `v` belongs to another graph.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable from another graph");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = tensor::conv2d(self.val(xi), self.val(wi), bi.map(|i| self.val(i)), stride, padding)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = tensor::dwconv2d(self.val(xi), self.val(wi), bi.map(|i| self.val(i)), padding)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.push(out, Op::DwConv2d { x: xi, w: wi, b: bi, padding }, &inputs))
    }

    fn binary(&mut self, a: Var, b: Var, op: fn(usize, usize) -> Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::broadcast_zip(self.val(ai), self.val(bi), name, f)?;
        Ok(self.push(out, op(ai, bi), &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, "div", |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: fn(usize) -> Op, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = f(self.val(xi))?;
        Ok(self.push(out, op(xi), &[xi]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.val(xi).scale(k);
        Ok(self.push(out, Op::Scale(xi, k), &[xi]))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar, |t| Ok(t.map(|v| v + k)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu, |t| Ok(tensor::gelu(t)))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu, |t| Ok(tensor::silu(t)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid, |t| Ok(tensor::sigmoid(t)))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs, |t| Ok(t.map(f64::abs)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt, |t| Ok(t.map(f64::sqrt)))
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gap, tensor::gap)
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::ChannelMean, |t| Ok(tensor::channel_mean(t)))
    }

    pub fn up2(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Up2, |t| Ok(tensor::nearest_up2(t)))
    }

    pub fn down2(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Down2, tensor::area_down2)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sum, |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Mean, |t| Ok(Tensor::scalar(t.mean())))
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xi, si, ti) = (self.idx(x)?, self.idx(scale)?, self.idx(shift)?);
        let out = tensor::channel_layer_norm(self.val(xi), self.val(si), self.val(ti), eps)?;
        let (xhat, inv_std) = tensor::layer_norm_parts(self.val(xi), eps);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: xi,
                scale: si,
                shift: ti,
                xhat,
                inv_std,
            },
            &[xi, si, ti],
        ))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let tensors: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let out = tensor::concat_channels(&tensors)?;
        Ok(self.push(out, Op::Concat(idx.clone()), &idx))
    }

    /// Channels `start .. start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).shape();
        if start + len > s.c || len == 0 {
            return Err(invalid(format!("narrow {start}..{} out of {} channels", start + len, s.c)));
        }
        let mut data = Vec::with_capacity(s.n * len * s.plane());
        for n in 0..s.n {
            let src = self.val(xi).sample(n);
            data.extend_from_slice(&src[start * s.plane()..(start + len) * s.plane()]);
        }
        let out = Tensor::new(Shape::new(s.n, len, s.h, s.w), data)?;
        Ok(self.push(out, Op::Narrow { x: xi, start }, &[xi]))
    }

    fn extremum(&mut self, x: Var, window: PriorWindow, take_max: bool) -> Result<Var> {
        let xi = self.idx(x)?;
        let (out, index) = channel_extremum(self.val(xi), window, take_max);
        Ok(self.push(out, Op::Gather { x: xi, index }, &[xi]))
    }

    /// Dark channel; the subgradient flows to the attaining element.
    pub fn dark_channel(&mut self, x: Var, window: PriorWindow) -> Result<Var> {
        self.extremum(x, window, false)
    }

    pub fn bright_channel(&mut self, x: Var, window: PriorWindow) -> Result<Var> {
        self.extremum(x, window, true)
    }

    /// Per-plane 2-D DFT. The output stacks real parts in channels `0..c`
    /// and imaginary parts in channels `c..2c`.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.val(xi);
        let s = t.shape();
        let mut out = Tensor::zeros(Shape::new(s.n, 2 * s.c, s.h, s.w));
        let mut buf = vec![Complex64::new(0.0, 0.0); s.plane()];
        for n in 0..s.n {
            for c in 0..s.c {
                for (z, &v) in buf.iter_mut().zip(t.plane(n, c)) {
                    *z = Complex64::new(v, 0.0);
                }
                fft2_inplace(&mut buf, s.h, s.w)?;
                for (d, z) in out.plane_mut(n, c).iter_mut().zip(&buf) {
                    *d = z.re;
                }
                for (d, z) in out.plane_mut(n, s.c + c).iter_mut().zip(&buf) {
                    *d = z.im;
                }
            }
        }
        Ok(self.push(out, Op::Fft2(xi), &[xi]))
    }

    /// Reverse pass from a single-element `loss`. Every parameter leaf gets
    /// a gradient of its own shape, zero if it does not influence `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.val(li).numel() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got {}", self.val(li).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(Tensor::ones(self.val(li).shape()));

        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.node_backward(i, &g)? {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&contribution),
                    None => grads[input] = Some(contribution),
                }
            }
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(i, g);
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Conv2d { x, w, b, stride, padding } => {
                let (gx, gw, gb) = tensor::conv2d_backward(self.val(x), self.val(w), g, stride, padding, self.wants(x))?;
                res.extend(gx.map(|t| (x, t)));
                res.push((w, gw));
                if let Some(b) = b {
                    res.push((b, gb.reshape(self.val(b).shape())?));
                }
            }
            &Op::DwConv2d { x, w, b, padding } => {
                let (gx, gw, gb) = tensor::dwconv2d_backward(self.val(x), self.val(w), g, padding, self.wants(x))?;
                res.extend(gx.map(|t| (x, t)));
                res.push((w, gw));
                if let Some(b) = b {
                    res.push((b, gb.reshape(self.val(b).shape())?));
                }
            }
            &Op::Add(a, b) => {
                res.push((a, tensor::reduce_to(g, self.val(a).shape())));
                res.push((b, tensor::reduce_to(g, self.val(b).shape())));
            }
            &Op::Sub(a, b) => {
                res.push((a, tensor::reduce_to(g, self.val(a).shape())));
                res.push((b, tensor::reduce_to(&g.neg(), self.val(b).shape())));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = tensor::mul(g, self.val(b))?;
                    res.push((a, tensor::reduce_to(&ga, self.val(a).shape())));
                }
                if self.wants(b) {
                    let gb = tensor::mul(g, self.val(a))?;
                    res.push((b, tensor::reduce_to(&gb, self.val(b).shape())));
                }
            }
            &Op::Div(a, b) => {
                if self.wants(a) {
                    let ga = tensor::div(g, self.val(b))?;
                    res.push((a, tensor::reduce_to(&ga, self.val(a).shape())));
                }
                if self.wants(b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = tensor::div(&tensor::mul(g, out)?, self.val(b))?.neg();
                    res.push((b, tensor::reduce_to(&t, self.val(b).shape())));
                }
            }
            &Op::Scale(x, k) => res.push((x, g.scale(k))),
            &Op::AddScalar(x) => res.push((x, g.clone())),
            &Op::Gelu(x) => res.push((x, zip(g, self.val(x), |g, v| g * tensor::gelu_grad_scalar(v)))),
            &Op::Silu(x) => res.push((
                x,
                zip(g, self.val(x), |g, v| {
                    let s = tensor::sigmoid_scalar(v);
                    g * s * (1.0 + v * (1.0 - s))
                }),
            )),
            &Op::Sigmoid(x) => res.push((x, zip(g, out, |g, s| g * s * (1.0 - s)))),
            &Op::Abs(x) => res.push((x, zip(g, self.val(x), |g, v| g * sign(v)))),
            &Op::Sqrt(x) => res.push((x, zip(g, out, |g, r| g / (2.0 * r)))),
            &Op::Gap(x) => {
                let s = self.val(x).shape();
                let area = s.plane() as f64;
                let mut gx = Tensor::zeros(s);
                for (plane, &gv) in gx.data_mut().chunks_mut(s.plane()).zip(g.data()) {
                    plane.fill(gv / area);
                }
                res.push((x, gx));
            }
            &Op::ChannelMean(x) => {
                let s = self.val(x).shape();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    let src: Vec<f64> = g.plane(n, 0).iter().map(|v| v / s.c as f64).collect();
                    for c in 0..s.c {
                        gx.plane_mut(n, c).copy_from_slice(&src);
                    }
                }
                res.push((x, gx));
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let s = xhat.shape();
                let p = s.plane();
                let sc = self.val(*scale).data();
                let mut gx = Tensor::zeros(s);
                let mut gscale = vec![0.0; s.c];
                let mut gshift = vec![0.0; s.c];
                let cf = s.c as f64;
                for n in 0..s.n {
                    let base = n * s.c * p;
                    for pix in 0..p {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..s.c {
                            let o = base + c * p + pix;
                            let gv = g.data()[o];
                            let xh = xhat.data()[o];
                            gscale[c] += gv * xh;
                            gshift[c] += gv;
                            let gxh = gv * sc[c];
                            m1 += gxh;
                            m2 += gxh * xh;
                        }
                        m1 /= cf;
                        m2 /= cf;
                        let r = inv_std[n * p + pix];
                        for c in 0..s.c {
                            let o = base + c * p + pix;
                            let gxh = g.data()[o] * sc[c];
                            gx.data_mut()[o] = r * (gxh - m1 - xhat.data()[o] * m2);
                        }
                    }
                }
                res.push((*x, gx));
                res.push((*scale, Tensor::vector(&gscale).reshape(self.val(*scale).shape())?));
                res.push((*shift, Tensor::vector(&gshift).reshape(self.val(*shift).shape())?));
            }
            &Op::Up2(x) => {
                let s = self.val(x).shape();
                let mut gx = Tensor::zeros(s);
                let w2 = 2 * s.w;
                for n in 0..s.n {
                    for c in 0..s.c {
                        let src = g.plane(n, c);
                        let dst = gx.plane_mut(n, c);
                        for y in 0..2 * s.h {
                            for xx in 0..w2 {
                                dst[(y / 2) * s.w + xx / 2] += src[y * w2 + xx];
                            }
                        }
                    }
                }
                res.push((x, gx));
            }
            &Op::Down2(x) => {
                let scaled = g.scale(0.25);
                let gx = tensor::nearest_up2(&scaled);
                res.push((x, gx));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &pi in parts {
                    let ps = self.val(pi).shape();
                    let mut data = Vec::with_capacity(ps.numel());
                    for n in 0..ps.n {
                        let src = g.sample(n);
                        data.extend_from_slice(&src[offset * ps.plane()..(offset + ps.c) * ps.plane()]);
                    }
                    offset += ps.c;
                    res.push((pi, Tensor::new(ps, data)?));
                }
            }
            &Op::Narrow { x, start } => {
                let s = self.val(x).shape();
                let len = g.shape().c;
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..len {
                        gx.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                    }
                }
                res.push((x, gx));
            }
            Op::Gather { x, index } => {
                let mut gx = Tensor::zeros(self.val(*x).shape());
                for (&src, &gv) in index.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                res.push((*x, gx));
            }
            &Op::Sum(x) => res.push((x, Tensor::full(self.val(x).shape(), g.item()))),
            &Op::Mean(x) => {
                let s = self.val(x).shape();
                res.push((x, Tensor::full(s, g.item() / s.numel() as f64)));
            }
            &Op::Fft2(x) => {
                // For real input, dL/dx = Re(DFT(g_re - i·g_im)).
                let s = self.val(x).shape();
                let mut gx = Tensor::zeros(s);
                let mut buf = vec![Complex64::new(0.0, 0.0); s.plane()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for ((z, &re), &im) in buf.iter_mut().zip(g.plane(n, c)).zip(g.plane(n, s.c + c)) {
                            *z = Complex64::new(re, -im);
                        }
                        fft2_inplace(&mut buf, s.h, s.w)?;
                        for (d, z) in gx.plane_mut(n, c).iter_mut().zip(&buf) {
                            *d = z.re;
                        }
                    }
                }
                res.push((x, gx));
            }
        }
        Ok(res)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
