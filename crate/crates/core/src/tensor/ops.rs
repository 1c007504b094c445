use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Shape, Tensor};
use crate::error::{invalid, Error, Result};

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF written through `erf`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Global average pooling: spatial mean per `(n, c)`, shape `(n, c, 1, 1)`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::Empty("gap"));
    }
    let area = s.plane() as f64;
    let data = x.data().chunks(s.plane()).map(|p| p.iter().sum::<f64>() / area).collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data)
}

/// Mean across channels at every pixel, shape `(n, 1, h, w)`.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        let dst = out.plane_mut(n, 0);
        for c in 0..s.c {
            for (d, v) in dst.iter_mut().zip(x.plane(n, c)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= s.c as f64);
    }
    out
}

/// Normalized values and per-pixel inverse standard deviation of a
/// channel-wise layer norm, before the affine step.
pub(crate) fn layer_norm_parts(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let s = x.shape();
    let p = s.plane();
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = vec![0.0; s.n * p];
    for n in 0..s.n {
        let src = x.sample(n);
        for i in 0..p {
            let mean = (0..s.c).map(|c| src[c * p + i]).sum::<f64>() / s.c as f64;
            let var = (0..s.c).map(|c| (src[c * p + i] - mean).powi(2)).sum::<f64>() / s.c as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[n * p + i] = r;
            let dst = &mut xhat.data_mut()[n * s.c * p..(n + 1) * s.c * p];
            for c in 0..s.c {
                dst[c * p + i] = (src[c * p + i] - mean) * r;
            }
        }
    }
    (xhat, inv_std)
}

/// Layer norm across the channel axis at each `(n, y, x)` followed by a
/// per-channel affine map.
pub fn channel_layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let s = x.shape();
    if s.c == 0 {
        return Err(Error::Empty("channel_layer_norm"));
    }
    if eps <= 0.0 {
        return Err(invalid("channel_layer_norm: eps must be positive"));
    }
    for t in [scale, shift] {
        if t.numel() != s.c {
            return Err(Error::Shape {
                op: "channel_layer_norm",
                left: s,
                right: t.shape(),
            });
        }
    }
    let (mut xhat, _) = layer_norm_parts(x, eps);
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let (a, b) = (scale.data()[c], shift.data()[c]);
            xhat.data_mut()[(n * s.c + c) * p..(n * s.c + c + 1) * p]
                .iter_mut()
                .for_each(|v| *v = *v * a + b);
        }
    }
    Ok(xhat)
}

/// Nearest-neighbour ×2 upsampling: each pixel becomes a 2×2 block.
pub fn nearest_up2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h2, w2) = (2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h2, w2));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * s.w + xx / 2];
                }
            }
        }
    }
    out
}

/// ×½ area downsampling: mean of each 2×2 block.
pub fn area_down2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(invalid(format!("area_down2 needs even height and width, got {s}")));
    }
    let (h2, w2) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h2, w2));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = 2 * y * s.w + 2 * xx;
                    dst[y * w2 + xx] = (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]) * 0.25;
                }
            }
        }
    }
    Ok(out)
}

/// Concatenation along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty("concat_channels"))?.shape();
    let mut c = 0;
    for t in parts {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::Shape {
                op: "concat_channels",
                left: first,
                right: s,
            });
        }
        c += s.c;
    }
    let mut data = Vec::with_capacity(first.n * c * first.plane());
    for n in 0..first.n {
        for t in parts {
            data.extend_from_slice(t.sample(n));
        }
    }
    Tensor::new(Shape::new(first.n, c, first.h, first.w), data)
}
