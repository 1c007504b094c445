//! Brute-force reference implementations and a finite-difference checker
//! shared by the integration tests.
#![allow(dead_code)]

use pgh2net::params::{Bound, ParamStore};
use pgh2net::{Graph, Padding, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values that are pairwise at least `gap` apart, shuffled; keeps min/max
/// and abs kinks away from finite-difference steps.
pub fn distinct(rng: &mut impl Rng, shape: Shape, gap: f64) -> Tensor {
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, v).unwrap()
}

/// Mirror index via the closed form on period `2(len − 1)`.
pub fn mirror(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= len as isize { period - m } else { m }) as usize
}

/// Value at a possibly padded coordinate, or `None` for a zero pad.
fn padded(x: &Tensor, n: usize, c: usize, y: isize, xx: isize, padding: Padding) -> Option<f64> {
    let s = x.shape();
    let inside = y >= 0 && xx >= 0 && (y as usize) < s.h && (xx as usize) < s.w;
    if inside {
        return Some(x.at(n, c, y as usize, xx as usize));
    }
    match padding {
        Padding::Reflect => Some(x.at(n, c, mirror(y, s.h), mirror(xx, s.w))),
        _ => None,
    }
}

pub fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: Padding) -> Tensor {
    let (s, ws) = (x.shape(), w.shape());
    let (ph, pw) = match padding {
        Padding::Valid => (0, 0),
        _ => (ws.h / 2, ws.w / 2),
    };
    let ho = (s.h + 2 * ph - ws.h) / stride + 1;
    let wo = (s.w + 2 * pw - ws.w) / stride + 1;
    Tensor::from_fn(Shape::new(s.n, ws.n, ho, wo), |n, co, oy, ox| {
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..s.c {
            for ki in 0..ws.h {
                for kj in 0..ws.w {
                    let y = (oy * stride + ki) as isize - ph as isize;
                    let xx = (ox * stride + kj) as isize - pw as isize;
                    if let Some(v) = padded(x, n, ci, y, xx, padding) {
                        acc += w.at(co, ci, ki, kj) * v;
                    }
                }
            }
        }
        acc
    })
}

pub fn dwconv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, padding: Padding) -> Tensor {
    let (s, ws) = (x.shape(), w.shape());
    let (ph, pw) = match padding {
        Padding::Valid => (0, 0),
        _ => (ws.h / 2, ws.w / 2),
    };
    let ho = s.h + 2 * ph - ws.h + 1;
    let wo = s.w + 2 * pw - ws.w + 1;
    Tensor::from_fn(Shape::new(s.n, s.c, ho, wo), |n, c, oy, ox| {
        let mut acc = b.map_or(0.0, |b| b.data()[c]);
        for ki in 0..ws.h {
            for kj in 0..ws.w {
                let y = (oy + ki) as isize - ph as isize;
                let xx = (ox + kj) as isize - pw as isize;
                if let Some(v) = padded(x, n, c, y, xx, padding) {
                    acc += w.at(c, 0, ki, kj) * v;
                }
            }
        }
        acc
    })
}

/// Windowed extremum over all channels, reflect-padded.
pub fn extremum_oracle(x: &Tensor, window: usize, take_max: bool) -> Tensor {
    let s = x.shape();
    let r = (window / 2) as isize;
    Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, xx| {
        let mut best = if take_max { f64::NEG_INFINITY } else { f64::INFINITY };
        for dy in -r..=r {
            for dx in -r..=r {
                for c in 0..s.c {
                    let v = x.at(n, c, mirror(y as isize + dy, s.h), mirror(xx as isize + dx, s.w));
                    best = if take_max { best.max(v) } else { best.min(v) };
                }
            }
        }
        best
    })
}

/// Bin index by linear search over explicit bin edges.
pub fn bin_oracle(v: f64, lo: f64, hi: f64, levels: usize) -> usize {
    let v = v.clamp(lo, hi);
    for b in 0..levels {
        let upper = lo + (hi - lo) * (b + 1) as f64 / levels as f64;
        if v < upper {
            return b;
        }
    }
    levels - 1
}

/// Textbook equalization table over the values' own range:
/// `round((cum(i) − cum_min) / (n − cum_min) · (L − 1))`.
pub fn equalize_oracle(values: &[f64], levels: usize) -> Vec<usize> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0usize; levels];
    for &v in values {
        counts[bin_oracle(v, lo, hi, levels)] += 1;
    }
    let n = values.len();
    let mut cum = Vec::with_capacity(levels);
    let mut acc = 0;
    for c in counts {
        acc += c;
        cum.push(acc);
    }
    let cmin = *cum.iter().find(|&&c| c > 0).unwrap();
    cum.iter()
        .map(|&c| ((c.saturating_sub(cmin)) as f64 / (n - cmin) as f64 * (levels - 1) as f64).round() as usize)
        .collect()
}

/// Direct `O(N⁴)` DFT of a real plane.
pub fn dft_oracle(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            for y in 0..h {
                for x in 0..w {
                    let angle = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re[u * w + v] += plane[y * w + x] * angle.cos();
                    im[u * w + v] += plane[y * w + x] * angle.sin();
                }
            }
        }
    }
    (re, im)
}

/// Windowed SSIM from explicit neighbourhood statistics: Gaussian weights
/// built from scratch, reflect-padded windows, two-pass variances.
pub fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let (size, sigma) = (11usize, 1.5f64);
    let r = (size / 2) as isize;
    let mut g1 = Vec::with_capacity(size);
    for i in -r..=r {
        g1.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let z: f64 = g1.iter().sum();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut pts = Vec::with_capacity(size * size);
                    for (iy, wy) in g1.iter().enumerate() {
                        for (ix, wx) in g1.iter().enumerate() {
                            let yy = mirror(y as isize + iy as isize - r, s.h);
                            let xx = mirror(x as isize + ix as isize - r, s.w);
                            pts.push((wy * wx / (z * z), a.at(n, c, yy, xx), b.at(n, c, yy, xx)));
                        }
                    }
                    let ma: f64 = pts.iter().map(|(w, p, _)| w * p).sum();
                    let mb: f64 = pts.iter().map(|(w, _, q)| w * q).sum();
                    let va: f64 = pts.iter().map(|(w, p, _)| w * (p - ma).powi(2)).sum();
                    let vb: f64 = pts.iter().map(|(w, _, q)| w * (q - mb).powi(2)).sum();
                    let cov: f64 = pts.iter().map(|(w, p, q)| w * (p - ma) * (q - mb)).sum();
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
        }
    }
    total / s.numel() as f64
}

/// `erf` by its Maclaurin series; accurate to ~1e-14 for `|x| ≤ 3`.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..120 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

/// Relative error `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central finite differences of `f` against reverse-mode gradients for
/// every input. `f` builds a scalar from graph leaves for the inputs.
/// Returns the worst relative error over inputs.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut ts = inputs.to_vec();
        for i in 0..inputs[k].numel() {
            let orig = ts[k].data()[i];
            ts[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&ts);
            ts[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&ts);
            ts[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Weighted sum `Σ r ⊙ y` with fixed pseudo-random weights, so every output
/// element contributes with a distinct sensitivity.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random(&mut r, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

/// Declares a block into a fresh store, replaces every tensor with random
/// values (zero-initialized scales included) and checks the input and all
/// parameters together.
pub fn block_grad_check(x: Tensor, declare: impl Fn(&mut ParamStore), f: impl Fn(&mut Graph, &Bound, Var) -> Var) -> f64 {
    let mut store = ParamStore::new();
    declare(&mut store);
    let mut r = rng(99);
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs = vec![x];
    for n in &names {
        inputs.push(random(&mut r, store.get(n).unwrap().shape(), -0.6, 0.6));
    }
    grad_check(&inputs, |g, v| {
        let bound: Bound = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let y = f(g, &bound, v[0]);
        project(g, y, 17)
    })
}
