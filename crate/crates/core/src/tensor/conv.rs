//! Dense and depthwise 2-D convolution. Dense convolution lowers each sample
//! to an `im2col` matrix and runs one GEMM; depthwise runs direct loops.

use super::{Shape, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// No padding; the kernel only visits in-bounds positions.
    Valid,
    /// "Same" padding of `k / 2` filled with zeros.
    Zero,
    /// "Same" padding of `k / 2` mirrored about the edge (edge not repeated).
    Reflect,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Zero | Padding::Reflect => k / 2,
        }
    }
}

/// Maps a possibly out-of-range coordinate back into `0..len` by mirror
/// reflection without repeating the edge sample.
pub fn reflect_index(mut i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let n = len as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    padding: Padding,
}

impl Geometry {
    fn new(x: Shape, weight: Shape, stride: usize, padding: Padding, depthwise: bool) -> Result<Self> {
        let op = if depthwise { "dwconv2d" } else { "conv2d" };
        let expected_ci = if depthwise { 1 } else { x.c };
        if weight.c != expected_ci || (depthwise && weight.n != x.c) {
            return Err(Error::Shape {
                op,
                left: x,
                right: weight,
            });
        }
        if stride != 1 && stride != 2 {
            return Err(invalid(format!("{op}: stride must be 1 or 2, got {stride}")));
        }
        if padding != Padding::Valid && (weight.h.is_multiple_of(2) || weight.w.is_multiple_of(2)) {
            return Err(invalid(format!("{op}: same padding needs odd kernels, got {weight}")));
        }
        let ph = padding.amount(weight.h);
        let pw = padding.amount(weight.w);
        if x.h + 2 * ph < weight.h || x.w + 2 * pw < weight.w {
            return Err(Error::Shape {
                op,
                left: x,
                right: weight,
            });
        }
        Ok(Self {
            n: x.n,
            ci: x.c,
            h: x.h,
            w: x.w,
            co: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            ph,
            pw,
            ho: (x.h + 2 * ph - weight.h) / stride + 1,
            wo: (x.w + 2 * pw - weight.w) / stride + 1,
            padding,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.co, self.ho, self.wo)
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1: the sample itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Padded-coordinate to source-coordinate maps for rows and columns.
    fn pad_maps(&self) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        (pad_map(self.h, self.ph, self.padding), pad_map(self.w, self.pw, self.padding))
    }
}

fn check_bias(bias: Option<&Tensor>, co: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != co {
            return Err(Error::Shape {
                op,
                left: Shape::new(1, co, 1, 1),
                right: b.shape(),
            });
        }
    }
    Ok(())
}

fn im2col(x: &[f64], g: &Geometry, rows: &[Option<usize>], cols: &[Option<usize>], padded: &mut [f64], out: &mut [f64]) {
    let p = g.p();
    let plane = g.h * g.w;
    let pw = cols.len();
    for ci in 0..g.ci {
        pad_plane(&x[ci * plane..(ci + 1) * plane], g.w, rows, cols, padded);
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut out[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let line = &padded[(oy * g.stride + ki) * pw + kj..];
                    if g.stride == 1 {
                        row.copy_from_slice(&line[..g.wo]);
                    } else {
                        for (ox, v) in row.iter_mut().enumerate() {
                            *v = line[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(gcols: &[f64], g: &Geometry, rows: &[Option<usize>], cols: &[Option<usize>], gpad: &mut [f64], out: &mut [f64]) {
    let p = g.p();
    let plane = g.h * g.w;
    let pw = cols.len();
    for ci in 0..g.ci {
        gpad.fill(0.0);
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src = &gcols[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let row = &src[oy * g.wo..(oy + 1) * g.wo];
                    let base = (oy * g.stride + ki) * pw + kj;
                    if g.stride == 1 {
                        for (d, v) in gpad[base..base + g.wo].iter_mut().zip(row) {
                            *d += v;
                        }
                    } else {
                        for (ox, v) in row.iter().enumerate() {
                            gpad[base + ox * g.stride] += v;
                        }
                    }
                }
            }
        }
        fold_plane(gpad, g.w, rows, cols, &mut out[ci * plane..(ci + 1) * plane]);
    }
}

/// `C (m×n) = alpha·A·B + beta·C` over row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense convolution. `weight` is `(co, ci, kh, kw)`, `bias` holds `co`
/// values in any shape. Output extent per axis is
/// `floor((len + 2·pad − k) / stride) + 1`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = Geometry::new(x.shape(), weight.shape(), stride, padding, false)?;
    check_bias(bias, g.co, "conv2d")?;
    let mut out = Tensor::zeros(g.out_shape());
    let (k, p) = (g.k(), g.p());
    let (rows, cols_t) = g.pad_maps();
    let mut padded = vec![0.0; rows.len() * cols_t.len()];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..g.n {
        let xs = x.sample(n);
        let colm: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &rows, &cols_t, &mut padded, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[n * g.co * p..(n + 1) * g.co * p];
        gemm(g.co, k, p, weight.data(), (k, 1), colm, (p, 1), 0.0, dst);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = Geometry::new(x.shape(), weight.shape(), stride, padding, false)?;
    let (k, p) = (g.k(), g.p());
    let (rows, cols_t) = g.pad_maps();
    let mut padded = vec![0.0; rows.len() * cols_t.len()];
    let mut gpad = vec![0.0; rows.len() * cols_t.len()];
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = vec![0.0; g.co];
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut gcols = vec![0.0; k * p];
    for n in 0..g.n {
        let go = grad_out.sample(n);
        for (co, chunk) in go.chunks(p).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        let xs = x.sample(n);
        let colm: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &rows, &cols_t, &mut padded, &mut cols);
            &cols
        };
        // dW (co×k) += dY (co×p) · colsᵀ (p×k)
        gemm(g.co, p, k, go, (p, 1), colm, (1, p), 1.0, gw.data_mut());
        if let Some(gx) = gx.as_mut() {
            let plane = g.ci * g.h * g.w;
            let dst = &mut gx.data_mut()[n * plane..(n + 1) * plane];
            if g.is_pointwise() {
                gemm(k, g.co, p, weight.data(), (1, k), go, (p, 1), 0.0, dst);
            } else {
                // dcols (k×p) = Wᵀ (k×co) · dY (co×p)
                gemm(k, g.co, p, weight.data(), (1, k), go, (p, 1), 0.0, &mut gcols);
                col2im(&gcols, &g, &rows, &cols_t, &mut gpad, dst);
            }
        }
    }
    Ok((gx, gw, Tensor::vector(&gb)))
}

fn pad_map(len: usize, pad: usize, padding: Padding) -> Vec<Option<usize>> {
    (0..len + 2 * pad)
        .map(|p| {
            let i = p as isize - pad as isize;
            if i >= 0 && (i as usize) < len {
                Some(i as usize)
            } else {
                match padding {
                    Padding::Reflect => Some(reflect_index(i, len)),
                    _ => None,
                }
            }
        })
        .collect()
}

/// Copies one plane into a padded buffer of `rows.len() × cols.len()`.
fn pad_plane(src: &[f64], w: usize, rows: &[Option<usize>], cols: &[Option<usize>], dst: &mut [f64]) {
    let pw = cols.len();
    for (py, r) in rows.iter().enumerate() {
        let line = &mut dst[py * pw..(py + 1) * pw];
        match r {
            Some(iy) => {
                let s = &src[iy * w..(iy + 1) * w];
                for (d, c) in line.iter_mut().zip(cols) {
                    *d = c.map_or(0.0, |ix| s[ix]);
                }
            }
            None => line.fill(0.0),
        }
    }
}

/// Adds a padded gradient buffer back onto the plane it was padded from.
fn fold_plane(gpad: &[f64], w: usize, rows: &[Option<usize>], cols: &[Option<usize>], dst: &mut [f64]) {
    let pw = cols.len();
    for (py, r) in rows.iter().enumerate() {
        let Some(iy) = r else { continue };
        for (px, col) in cols.iter().enumerate() {
            if let Some(ix) = col {
                dst[iy * w + ix] += gpad[py * pw + px];
            }
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes[0] + lanes[1] + lanes[2] + lanes[3] + tail
}

/// Depthwise convolution with stride 1. `weight` is `(c, 1, kh, kw)`; output
/// channel `i` only reads input channel `i`.
pub fn dwconv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, padding: Padding) -> Result<Tensor> {
    let g = Geometry::new(x.shape(), weight.shape(), 1, padding, true)?;
    check_bias(bias, g.co, "dwconv2d")?;
    let rows = pad_map(g.h, g.ph, padding);
    let cols = pad_map(g.w, g.pw, padding);
    let pw = cols.len();
    let mut padded = vec![0.0; rows.len() * pw];
    let mut out = Tensor::zeros(g.out_shape());
    let taps = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.ci {
            pad_plane(x.plane(n, c), g.w, &rows, &cols, &mut padded);
            let wk = &weight.data()[c * taps..(c + 1) * taps];
            let b = bias.map_or(0.0, |b| b.data()[c]);
            let dst = out.plane_mut(n, c);
            for oy in 0..g.ho {
                let row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                row.fill(b);
                for ki in 0..g.kh {
                    let line = &padded[(oy + ki) * pw..(oy + ki + 1) * pw];
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        for (v, p) in row.iter_mut().zip(&line[kj..kj + g.wo]) {
                            *v += wv * p;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn dwconv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    padding: Padding,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = Geometry::new(x.shape(), weight.shape(), 1, padding, true)?;
    let rows = pad_map(g.h, g.ph, padding);
    let cols = pad_map(g.w, g.pw, padding);
    let pw = cols.len();
    let mut padded = vec![0.0; rows.len() * pw];
    let mut gpad = vec![0.0; rows.len() * pw];
    let taps = g.kh * g.kw;
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = vec![0.0; g.ci];
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    for n in 0..g.n {
        for c in 0..g.ci {
            pad_plane(x.plane(n, c), g.w, &rows, &cols, &mut padded);
            gpad.fill(0.0);
            let go = grad_out.plane(n, c);
            gb[c] += go.iter().sum::<f64>();
            let wk = &weight.data()[c * taps..(c + 1) * taps];
            let gwk = &mut gw.data_mut()[c * taps..(c + 1) * taps];
            for oy in 0..g.ho {
                let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                for ki in 0..g.kh {
                    let base = (oy + ki) * pw;
                    for kj in 0..g.kw {
                        let t = ki * g.kw + kj;
                        let line = &padded[base + kj..base + kj + g.wo];
                        gwk[t] += dot(grow, line);
                        if need_input {
                            let wv = wk[t];
                            for (d, gv) in gpad[base + kj..base + kj + g.wo].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                fold_plane(&gpad, g.w, &rows, &cols, gx.plane_mut(n, c));
            }
        }
    }
    Ok((gx, gw, Tensor::vector(&gb)))
}
