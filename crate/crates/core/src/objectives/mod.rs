//! Multi-scale spatial, frequency and SSIM losses, the dark-channel
//! sparsity term, and the PSNR/SSIM metrics.

pub(crate) mod fft;

pub use fft::fft2d;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::priors::PriorWindow;
use crate::tensor::{Padding, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub frequency: f64,
    pub ssim: f64,
    pub sparsity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            frequency: 0.5,
            ssim: 1.0,
            sparsity: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.frequency), ("lambda2", self.ssim), ("lambda3", self.sparsity)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// How a complex spectrum difference is turned into a non-negative value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrequencyNorm {
    /// `|Δre| + |Δim|`
    #[default]
    Parts,
    /// `sqrt(Δre² + Δim²)`
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    /// Normalized `size × size` Gaussian, row-major.
    pub fn window(&self) -> Vec<f64> {
        let r = (self.size / 2) as f64;
        let g: Vec<f64> = (0..self.size)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / total).collect();
        g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape { op, left: a, right: b });
    }
    Ok(())
}

/// Per-pixel SSIM on the graph. Local statistics use the Gaussian window
/// over a reflect-padded neighbourhood, so the map has the input's shape.
pub fn ssim_map_graph(g: &mut Graph, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = g.shape(a);
    same_shape("ssim", s, g.shape(b))?;
    if cfg.size.is_multiple_of(2) {
        return Err(invalid(format!("ssim window must be odd, got {}", cfg.size)));
    }
    let win = cfg.window();
    let k = cfg.size;
    let w = g.constant(Tensor::new(Shape::new(s.c, 1, k, k), (0..s.c).flat_map(|_| win.iter().copied()).collect())?);
    let blur = |g: &mut Graph, x: Var| g.dwconv2d(x, w, None, Padding::Reflect);

    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = blur(g, aa)?;
    let e_bb = blur(g, bb)?;
    let e_ab = blur(g, ab)?;

    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let lum_num = g.scale(mu_ab, 2.0)?;
    let lum_num = g.add_scalar(lum_num, cfg.c1())?;
    let lum_den = g.add(mu_aa, mu_bb)?;
    let lum_den = g.add_scalar(lum_den, cfg.c1())?;
    let cs_num = g.scale(cov, 2.0)?;
    let cs_num = g.add_scalar(cs_num, cfg.c2())?;
    let cs_den = g.add(var_a, var_b)?;
    let cs_den = g.add_scalar(cs_den, cfg.c2())?;

    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    g.div(num, den)
}

pub fn ssim_map(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let m = ssim_map_graph(&mut g, a, b, cfg)?;
    Ok(g.value(m).clone())
}

pub fn mean_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(ssim_map(a, b, &SsimConfig::default())?.mean())
}

/// `10·log10(peak² / MSE)`, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_shape("psnr", a.shape(), b.shape())?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub const PSNR_CAP: f64 = 100.0;

/// `(1/P)·‖X̂ − X‖₁` for one scale, with `P` the element count.
fn spatial_term(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    same_shape("loss_spatial", g.shape(pred), g.shape(gt))?;
    let d = g.sub(pred, gt)?;
    let d = g.abs(d)?;
    g.mean(d)
}

fn frequency_term(g: &mut Graph, pred: Var, gt: Var, norm: FrequencyNorm) -> Result<Var> {
    let s = g.shape(pred);
    same_shape("loss_frequency", s, g.shape(gt))?;
    let fp = g.fft2(pred)?;
    let fg = g.fft2(gt)?;
    let d = g.sub(fp, fg)?;
    let mag = match norm {
        FrequencyNorm::Parts => g.abs(d)?,
        FrequencyNorm::Magnitude => {
            let re = g.narrow(d, 0, s.c)?;
            let im = g.narrow(d, s.c, s.c)?;
            let re2 = g.mul(re, re)?;
            let im2 = g.mul(im, im)?;
            let sq = g.add(re2, im2)?;
            g.sqrt(sq)?
        }
    };
    let total = g.sum(mag)?;
    g.scale(total, 1.0 / s.numel() as f64)
}

fn ssim_term(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let m = ssim_map_graph(g, pred, gt, &SsimConfig::default())?;
    let m = g.mean(m)?;
    let neg = g.scale(m, -1.0)?;
    g.add_scalar(neg, 1.0)
}

fn sum_scales(g: &mut Graph, preds: &[Var], gts: &[Var], mut term: impl FnMut(&mut Graph, Var, Var) -> Result<Var>) -> Result<Var> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(invalid(format!("{} predictions for {} targets", preds.len(), gts.len())));
    }
    let mut acc = term(g, preds[0], gts[0])?;
    for (&p, &t) in preds.iter().zip(gts).skip(1) {
        let v = term(g, p, t)?;
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

pub fn loss_spatial(g: &mut Graph, preds: &[Var], gts: &[Var]) -> Result<Var> {
    sum_scales(g, preds, gts, spatial_term)
}

pub fn loss_frequency(g: &mut Graph, preds: &[Var], gts: &[Var], norm: FrequencyNorm) -> Result<Var> {
    sum_scales(g, preds, gts, |g, p, t| frequency_term(g, p, t, norm))
}

pub fn loss_ssim(g: &mut Graph, preds: &[Var], gts: &[Var]) -> Result<Var> {
    sum_scales(g, preds, gts, ssim_term)
}

/// Mean dark channel of a prediction; the sparsity regularizer.
pub fn dark_sparsity(g: &mut Graph, pred: Var, window: PriorWindow) -> Result<Var> {
    let d = g.dark_channel(pred, window)?;
    g.mean(d)
}

/// Graph nodes for every loss component.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub spatial: Var,
    pub frequency: Var,
    pub ssim: Var,
    pub reg: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub spatial: f64,
    pub frequency: f64,
    pub ssim: f64,
    pub reg: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        LossTerms {
            total: g.value(self.total).item(),
            spatial: g.value(self.spatial).item(),
            frequency: g.value(self.frequency).item(),
            ssim: g.value(self.ssim).item(),
            reg: g.value(self.reg).item(),
        }
    }
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.total, self.spatial, self.frequency, self.ssim, self.reg]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_spatial + λ₁·L_freq + λ₂·L_ssim + λ₃·reg`.
pub fn combine(g: &mut Graph, spatial: Var, frequency: Var, ssim: Var, reg: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let f = g.scale(frequency, w.frequency)?;
    let s = g.scale(ssim, w.ssim)?;
    let r = g.scale(reg, w.sparsity)?;
    let t = g.add(spatial, f)?;
    let t = g.add(t, s)?;
    g.add(t, r)
}

/// All loss terms for full/half/quarter predictions against their targets.
/// The regularizer is the mean dark channel of the full-resolution output.
pub fn loss_total(g: &mut Graph, preds: &[Var], gts: &[Var], w: &LossWeights, norm: FrequencyNorm, window: PriorWindow) -> Result<LossVars> {
    let spatial = loss_spatial(g, preds, gts)?;
    let frequency = loss_frequency(g, preds, gts, norm)?;
    let ssim = loss_ssim(g, preds, gts)?;
    let reg = dark_sparsity(g, preds[0], window)?;
    let total = combine(g, spatial, frequency, ssim, reg, w)?;
    Ok(LossVars {
        total,
        spatial,
        frequency,
        ssim,
        reg,
    })
}

/// Full, half and quarter resolution targets by repeated 2×2 area averaging.
pub fn target_pyramid(g: &mut Graph, clean: Var) -> Result<[Var; 3]> {
    let half = g.down2(clean)?;
    let quarter = g.down2(half)?;
    Ok([clean, half, quarter])
}

/// Tensor-level convenience: every loss term for concrete predictions.
pub fn evaluate_losses(preds: &[Tensor], gts: &[Tensor], w: &LossWeights) -> Result<LossTerms> {
    let mut g = Graph::new();
    let p: Vec<Var> = preds.iter().map(|t| g.constant(t.clone())).collect();
    let t: Vec<Var> = gts.iter().map(|t| g.constant(t.clone())).collect();
    let vars = loss_total(&mut g, &p, &t, w, FrequencyNorm::Parts, PriorWindow::default())?;
    Ok(vars.values(&g))
}
