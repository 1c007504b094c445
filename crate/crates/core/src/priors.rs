//! Bright/dark channel extraction, intensity histograms, CDFs, histogram
//! equalization and distribution similarity.

use crate::error::{invalid, Error, Result};
use crate::tensor::{reflect_index, Shape, Tensor};

/// Side length of the square window Ω used by the channel priors. Windows
/// are centred and reflect-padded at the borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PriorWindow(usize);

impl PriorWindow {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(invalid(format!("prior window must be odd and positive, got {size}")));
        }
        Ok(Self(size))
    }

    pub fn size(&self) -> usize {
        self.0
    }
}

impl Default for PriorWindow {
    fn default() -> Self {
        Self(3)
    }
}

/// Windowed extremum over all channels. Returns the `(n, 1, h, w)` map and,
/// for each output element, the flat index into `f` of the first element in
/// scan order (window rows, window columns, then channels) that attains it.
pub(crate) fn channel_extremum(f: &Tensor, window: PriorWindow, take_max: bool) -> (Tensor, Vec<usize>) {
    let s = f.shape();
    let p = s.plane();
    let better = |cand: f64, cur: f64| if take_max { cand > cur } else { cand < cur };

    // per-pixel extremum across channels
    let mut px_val = vec![0.0; s.n * p];
    let mut px_idx = vec![0usize; s.n * p];
    for n in 0..s.n {
        for i in 0..p {
            let mut best_off = f.offset(n, 0, 0, 0) + i;
            let mut best = f.data()[best_off];
            for c in 1..s.c {
                let off = f.offset(n, c, 0, 0) + i;
                let v = f.data()[off];
                if better(v, best) {
                    best = v;
                    best_off = off;
                }
            }
            px_val[n * p + i] = best;
            px_idx[n * p + i] = best_off;
        }
    }

    let r = (window.size() / 2) as isize;
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    let mut index = vec![0usize; s.n * p];
    for n in 0..s.n {
        let vals = &px_val[n * p..(n + 1) * p];
        let idxs = &px_idx[n * p..(n + 1) * p];
        for y in 0..s.h {
            for x in 0..s.w {
                let mut best = f64::NAN;
                let mut best_i = 0;
                for dy in -r..=r {
                    let yy = reflect_index(y as isize + dy, s.h);
                    for dx in -r..=r {
                        let xx = reflect_index(x as isize + dx, s.w);
                        let v = vals[yy * s.w + xx];
                        if best.is_nan() || better(v, best) {
                            best = v;
                            best_i = idxs[yy * s.w + xx];
                        }
                    }
                }
                out.set(n, 0, y, x, best);
                index[n * p + y * s.w + x] = best_i;
            }
        }
    }
    (out, index)
}

/// Dark channel: minimum over the window and over all channels.
pub fn dark_channel(f: &Tensor, window: PriorWindow) -> Tensor {
    channel_extremum(f, window, false).0
}

/// Bright channel: maximum over the window and over all channels.
pub fn bright_channel(f: &Tensor, window: PriorWindow) -> Tensor {
    channel_extremum(f, window, true).0
}

/// Probability vector over `L` intensity levels.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(invalid("distribution entries must be non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("distribution sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("distribution"));
        }
        Ok(Self {
            probs: counts.iter().map(|&k| k as f64 / total as f64).collect(),
        })
    }

    pub fn levels(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Population variance of the bin probabilities; lower means flatter.
    pub fn variance(&self) -> f64 {
        let l = self.levels() as f64;
        let mean = 1.0 / l;
        self.probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / l
    }

    pub fn cosine(&self, other: &Distribution) -> Result<f64> {
        cosine_similarity(&self.probs, &other.probs)
    }
}

/// Bin of `v` among `levels` equal-width bins over `[lo, hi]`; values are
/// clamped into range first and `hi` lands in the last bin. A collapsed
/// range maps everything to bin 0.
pub fn quantize(v: f64, lo: f64, hi: f64, levels: usize) -> usize {
    if !(hi > lo) {
        return 0;
    }
    let t = (v.clamp(lo, hi) - lo) / (hi - lo);
    ((t * levels as f64).floor() as usize).min(levels - 1)
}

pub fn histogram_counts(values: &[f64], levels: usize, lo: f64, hi: f64) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::Empty("histogram"));
    }
    if levels == 0 {
        return Err(invalid("histogram needs at least one level"));
    }
    let mut counts = vec![0usize; levels];
    for &v in values {
        counts[quantize(v, lo, hi, levels)] += 1;
    }
    Ok(counts)
}

pub fn histogram(values: &[f64], levels: usize, lo: f64, hi: f64) -> Result<Distribution> {
    if !(hi > lo) {
        return Err(invalid(format!("histogram range [{lo}, {hi}] is empty")));
    }
    Distribution::from_counts(&histogram_counts(values, levels, lo, hi)?)
}

/// Accumulated normalized histogram.
pub fn cdf(d: &Distribution) -> Vec<f64> {
    let mut acc = 0.0;
    d.probs()
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

/// Outcome of [`equalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Equalized {
    /// Input values quantized to levels over their own min-max range.
    pub quantized: Vec<usize>,
    /// Equalized level of every input value.
    pub remapped: Vec<usize>,
    /// Level-to-level remap table.
    pub mapping: Vec<usize>,
    pub input: Distribution,
    pub output: Distribution,
    /// Only one level occupied; the identity mapping was returned.
    pub degenerate: bool,
}

/// Classic histogram equalization at `levels` levels: level `i` maps to
/// `round((cdf(i) − cdf_min) / (1 − cdf_min) · (L − 1))`, with `cdf_min`
/// the smallest non-zero CDF value.
pub fn equalize(values: &[f64], levels: usize) -> Result<Equalized> {
    if values.is_empty() {
        return Err(Error::Empty("equalize"));
    }
    if levels < 2 {
        return Err(invalid("equalize needs at least two levels"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let quantized: Vec<usize> = values.iter().map(|&v| quantize(v, lo, hi, levels)).collect();
    let mut counts = vec![0usize; levels];
    for &q in &quantized {
        counts[q] += 1;
    }
    let input = Distribution::from_counts(&counts)?;
    let total = values.len();
    let mut cum = Vec::with_capacity(levels);
    let mut acc = 0usize;
    for &k in &counts {
        acc += k;
        cum.push(acc);
    }
    let cum_min = cum.iter().copied().find(|&k| k > 0).unwrap_or(total);

    if cum_min == total {
        return Ok(Equalized {
            remapped: quantized.clone(),
            quantized,
            mapping: (0..levels).collect(),
            output: input.clone(),
            input,
            degenerate: true,
        });
    }

    // integer counts keep exact halves exact before rounding
    let span = (levels - 1) as f64;
    let mapping: Vec<usize> = cum
        .iter()
        .map(|&k| ((k.saturating_sub(cum_min)) as f64 / (total - cum_min) as f64 * span).round() as usize)
        .collect();
    let remapped: Vec<usize> = quantized.iter().map(|&q| mapping[q]).collect();
    let mut out_counts = vec![0usize; levels];
    for &r in &remapped {
        out_counts[r] += 1;
    }
    Ok(Equalized {
        quantized,
        remapped,
        mapping,
        input,
        output: Distribution::from_counts(&out_counts)?,
        degenerate: false,
    })
}

/// `⟨a, b⟩ / (‖a‖·‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "cosine similarity of vectors with {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}
