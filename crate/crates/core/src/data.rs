//! Synthetic hazy/clean pairs from the atmospheric scattering model, PPM
//! image files, manifests, cropping and flips.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Sampling ranges for airlight and scattering coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeRanges {
    pub airlight: (f64, f64),
    pub beta: (f64, f64),
}

impl Default for HazeRanges {
    fn default() -> Self {
        Self {
            airlight: (0.7, 1.0),
            beta: (0.5, 1.5),
        }
    }
}

impl HazeRanges {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.airlight;
        let (b0, b1) = self.beta;
        if !(0.0..=1.0).contains(&a0) || !(0.0..=1.0).contains(&a1) || a0 > a1 {
            return Err(invalid(format!("airlight range must lie in [0, 1], got {a0}..{a1}")));
        }
        if !(b0 > 0.0) || b0 > b1 || !b1.is_finite() {
            return Err(invalid(format!("beta range must be positive, got {b0}..{b1}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    pub airlight: [f64; 3],
    pub beta: f64,
    /// `(1, 1, h, w)` normalized depth in `[0, 1]`.
    pub depth: Tensor,
}

impl HazeParams {
    pub fn sample(rng: &mut impl Rng, h: usize, w: usize, ranges: &HazeRanges) -> Result<Self> {
        ranges.validate()?;
        let (a0, a1) = ranges.airlight;
        let (b0, b1) = ranges.beta;
        let airlight = [0; 3].map(|_| rng.gen_range(a0..=a1));
        let beta = rng.gen_range(b0..=b1);
        Ok(Self {
            airlight,
            beta,
            depth: depth_field(rng, h, w),
        })
    }

    /// `t = exp(−β·d)`, shape `(1, 1, h, w)`.
    pub fn transmission(&self) -> Tensor {
        self.depth.map(|d| (-self.beta * d).exp())
    }
}

/// Smooth depth map: a 4×4 grid of uniform values, bilinearly upsampled.
pub fn depth_field(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    const G: usize = 4;
    let grid: Vec<f64> = (0..G * G).map(|_| rng.gen::<f64>()).collect();
    let coord = |i: usize, len: usize| {
        if len <= 1 {
            0.0
        } else {
            i as f64 * (G - 1) as f64 / (len - 1) as f64
        }
    };
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        let (gy, gx) = (coord(y, h), coord(x, w));
        let (y0, x0) = ((gy as usize).min(G - 2), (gx as usize).min(G - 2));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |r: usize, c: usize| grid[r * G + c];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// `hazy = clean·t + A·(1 − t)` for a `(n, 3, h, w)` clean batch.
pub fn synthesize(clean: &Tensor, p: &HazeParams) -> Result<Tensor> {
    let s = clean.shape();
    if !(p.beta > 0.0) {
        return Err(invalid(format!("beta must be positive, got {}", p.beta)));
    }
    if s.c != 3 {
        return Err(invalid(format!("synthesize needs 3 channels, got {s}")));
    }
    let ds = p.depth.shape();
    if (ds.n, ds.c, ds.h, ds.w) != (1, 1, s.h, s.w) {
        return Err(Error::Shape {
            op: "synthesize",
            left: s,
            right: ds,
        });
    }
    let t = p.transmission();
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        let tv = t.at(0, 0, y, x);
        clean.at(n, c, y, x) * tv + p.airlight[c] * (1.0 - tv)
    }))
}

/// Procedural clean image: a per-channel gradient from a dark to a bright
/// value, a handful of flat rectangles and disks, then fine texture noise.
pub fn generate_clean(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros(Shape::new(1, 3, h, w));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let span = (h as f64 * dy.abs() + w as f64 * dx.abs()).max(1.0);
    let offset = (if dy < 0.0 { -dy * h as f64 } else { 0.0 }) + (if dx < 0.0 { -dx * w as f64 } else { 0.0 });
    for c in 0..3 {
        let dark = rng.gen_range(0.0..0.15);
        let bright = rng.gen_range(0.85..1.0);
        let (from, to) = if rng.gen_bool(0.5) { (dark, bright) } else { (bright, dark) };
        for y in 0..h {
            for x in 0..w {
                let s = ((y as f64 * dy + x as f64 * dx + offset) / span).clamp(0.0, 1.0);
                img.set(0, c, y, x, from + (to - from) * s);
            }
        }
    }
    let shapes = rng.gen_range(3..=7);
    for _ in 0..shapes {
        let color = [0; 3].map(|_| rng.gen_range(0.0..1.0));
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(0.05..0.25) * h as f64;
        let rx = rng.gen_range(0.05..0.25) * w as f64;
        let disk = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disk { ny * ny + nx * nx <= 1.0 } else { ny.abs() <= 1.0 && nx.abs() <= 1.0 };
                if inside {
                    for (c, v) in color.iter().enumerate() {
                        img.set(0, c, y, x, *v);
                    }
                }
            }
        }
    }
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub clean: Tensor,
    pub hazy: Tensor,
    pub params: HazeParams,
    pub seed: u64,
}

impl ImageSample {
    /// Clean image and haze drawn from independent streams of `seed`.
    pub fn synthetic(seed: u64, size: usize, ranges: &HazeRanges) -> Result<Self> {
        let clean = generate_clean(seed, size, size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let params = HazeParams::sample(&mut rng, size, size, ranges)?;
        let hazy = synthesize(&clean, &params)?;
        Ok(Self {
            clean,
            hazy,
            params,
            seed,
        })
    }

    pub fn flipped(&self) -> Self {
        Self {
            clean: self.clean.flip_horizontal(),
            hazy: self.hazy.flip_horizontal(),
            params: HazeParams {
                depth: self.params.depth.flip_horizontal(),
                ..self.params.clone()
            },
            seed: self.seed,
        }
    }

    /// The same `size × size` window of clean, hazy and depth.
    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<Self> {
        Ok(Self {
            clean: crop(&self.clean, y0, x0, size, size)?,
            hazy: crop(&self.hazy, y0, x0, size, size)?,
            params: HazeParams {
                depth: crop(&self.params.depth, y0, x0, size, size)?,
                ..self.params.clone()
            },
            seed: self.seed,
        })
    }
}

/// Horizontal flip of both images with probability `prob`.
pub fn augment(sample: &ImageSample, prob: f64, rng: &mut impl Rng) -> ImageSample {
    if rng.gen::<f64>() < prob {
        sample.flipped()
    } else {
        sample.clone()
    }
}

pub fn random_crop(sample: &ImageSample, size: usize, rng: &mut impl Rng) -> Result<ImageSample> {
    let s = sample.clean.shape();
    if size == 0 || !size.is_multiple_of(4) {
        return Err(invalid(format!("crop size must be a positive multiple of 4, got {size}")));
    }
    if size > s.h || size > s.w {
        return Err(invalid(format!("crop size {size} exceeds image {}×{}", s.h, s.w)));
    }
    let y0 = rng.gen_range(0..=s.h - size);
    let x0 = rng.gen_range(0..=s.w - size);
    sample.crop(y0, x0, size)
}

pub fn crop(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if y0 + h > s.h || x0 + w > s.w {
        return Err(invalid(format!("crop {h}×{w} at ({y0}, {x0}) exceeds {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| t.at(n, c, y0 + y, x0 + x)))
}

/// Fixed set of synthetic pairs used as a training or test corpus.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub samples: Vec<ImageSample>,
}

impl SyntheticSet {
    /// Pair `i` uses seed `seed · 1_000_003 + i`.
    pub fn generate(count: usize, size: usize, seed: u64, ranges: &HazeRanges) -> Result<Self> {
        let samples = (0..count as u64)
            .map(|i| ImageSample::synthetic(seed.wrapping_mul(1_000_003).wrapping_add(i), size, ranges))
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A training batch of `(hazy, clean)` patches: pairs drawn with
    /// replacement, randomly cropped and flipped.
    pub fn batch(&self, batch: usize, patch: usize, flip_prob: f64, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
        if self.samples.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let mut hazy = Vec::with_capacity(batch);
        let mut clean = Vec::with_capacity(batch);
        for _ in 0..batch {
            let s = &self.samples[rng.gen_range(0..self.samples.len())];
            let s = random_crop(s, patch, rng)?;
            let s = augment(&s, flip_prob, rng);
            hazy.push(s.hazy);
            clean.push(s.clean);
        }
        Ok((Tensor::stack(&hazy)?, Tensor::stack(&clean)?))
    }
}

fn ppm_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ppm {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decodes a binary P6 image with maxval 255 into `(1, 3, h, w)` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_error(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| ppm_error(path, "non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(ppm_error(path, format!("expected magic P6, found {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| ppm_error(path, format!("bad {what} {s:?}")));
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(ppm_error(path, format!("only maxval 255 is supported, found {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(ppm_error(path, "zero-sized image"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ppm_error(path, "missing whitespace after header"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let need = w * h * 3;
    if payload.len() < need {
        return Err(ppm_error(path, format!("payload has {} bytes, expected {need}", payload.len())));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| payload[(y * w + x) * 3 + c] as f64 / 255.0))
}

/// Encodes a `(1, 3, h, w)` or `(1, 1, h, w)` image; single channels are
/// written as gray. Values are clamped to `[0, 1]` and rounded.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n != 1 || (s.c != 3 && s.c != 1) {
        return Err(invalid(format!("ppm output needs (1, 3, h, w) or (1, 1, h, w), got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = t.at(0, if s.c == 1 { 0 } else { c }, y, x);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ppm_error(path, e.to_string()))?;
    decode_ppm(&bytes, path)
}

pub fn save_ppm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(t)?).map_err(|e| ppm_error(path, e.to_string()))
}

/// Reads `clean hazy` path pairs, one per line; relative paths resolve
/// against the manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [clean, hazy] = parts[..] else {
            return Err(invalid(format!("{}:{}: expected \"clean_path hazy_path\"", path.display(), i + 1)));
        };
        pairs.push((base.join(clean), base.join(hazy)));
    }
    Ok(pairs)
}
