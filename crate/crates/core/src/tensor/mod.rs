//! Dense rank-4 `f64` tensors in `(n, c, h, w)` layout and the pure kernels
//! the autodiff graph is built from.

mod conv;
mod ops;

use std::fmt;

use crate::error::{invalid, Error, Result};

pub use conv::{conv2d, dwconv2d, reflect_index, Padding};
pub(crate) use conv::{conv2d_backward, dwconv2d_backward};
pub use ops::{
    area_down2, channel_layer_norm, channel_mean, concat_channels, gap, gelu, gelu_scalar,
    nearest_up2, sigmoid, sigmoid_scalar, silu,
};
pub(crate) use ops::{gelu_grad_scalar, layer_norm_parts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    /// Row-major strides, with broadcast dimensions (size 1 against a larger
    /// target) given stride zero.
    fn strides_against(&self, target: Shape) -> [usize; 4] {
        let dense = [self.c * self.h * self.w, self.h * self.w, self.w, 1];
        let own = self.dims();
        let tgt = target.dims();
        let mut s = [0; 4];
        for i in 0..4 {
            s[i] = if own[i] == 1 && tgt[i] != 1 { 0 } else { dense[i] };
        }
        s
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(invalid(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Per-channel vector stored as `(1, c, 1, 1)`.
    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: Shape::new(1, values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// The `h·w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copy of sample `n` as a `(1, c, h, w)` tensor.
    pub fn sample_tensor(&self, n: usize) -> Tensor {
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.sample(n).to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::Shape {
                    op: "stack",
                    left: s,
                    right: t.shape,
                });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(n, s.c, s.h, s.w), data)
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = self.shape.w;
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }
}

pub fn broadcast_shape(a: Shape, b: Shape, op: &'static str) -> Result<Shape> {
    let (da, db) = (a.dims(), b.dims());
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (da[i], db[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    left: a,
                    right: b,
                })
            }
        };
    }
    Ok(Shape::from_dims(out))
}

/// Elementwise binary op with broadcasting of unit dimensions.
pub fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape,
            data,
        });
    }
    let out = broadcast_shape(a.shape, b.shape, op)?;
    let sa = a.shape.strides_against(out);
    let sb = b.shape.strides_against(out);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..out.n {
        for c in 0..out.c {
            for y in 0..out.h {
                let ba = n * sa[0] + c * sa[1] + y * sa[2];
                let bb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out.w {
                    data.push(f(a.data[ba + x * sa[3]], b.data[bb + x * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor { shape: out, data })
}

/// Sums `t` over every axis where `target` has extent 1 and `t` does not,
/// the adjoint of broadcasting `target` up to `t.shape()`.
pub fn reduce_to(t: &Tensor, target: Shape) -> Tensor {
    if t.shape == target {
        return t.clone();
    }
    let s = target.strides_against(t.shape);
    let mut out = Tensor::zeros(target);
    let src = t.shape;
    let mut i = 0;
    for n in 0..src.n {
        for c in 0..src.c {
            for y in 0..src.h {
                let base = n * s[0] + c * s[1] + y * s[2];
                for x in 0..src.w {
                    out.data[base + x * s[3]] += t.data[i];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_zip(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_zip(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_zip(a, b, "mul", |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_zip(a, b, "div", |x, y| x / y)
}
