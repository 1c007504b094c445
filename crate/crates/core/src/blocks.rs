//! Spatial harmonization, prior aggregation, channel harmonization, the
//! sandwich bottleneck and histogram-equalization guidance.
//!
//! Each block has a parameter struct with a `declare` step that adds its
//! tensors to a [`ParamStore`] under a path prefix and a `bind` step that
//! looks the matching graph leaves up again for a forward pass.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, Initializer, ParamStore};
use crate::priors::{cosine_similarity, equalize, histogram, PriorWindow};
use crate::tensor::{Padding, Shape, Tensor};

const NORM_EPS: f64 = 1e-6;

fn path(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Convolution weight `(co, ci, k, k)` plus an optional `(1, co, 1, 1)` bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl ConvParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, co: usize, ci: usize, k: usize, bias: bool, init: &mut Initializer) -> Result<()> {
        store.insert(path(prefix, "weight"), init.fan_in_uniform(Shape::new(co, ci, k, k)))?;
        if bias {
            store.insert(path(prefix, "bias"), Tensor::zeros(Shape::new(1, co, 1, 1)))?;
        }
        Ok(())
    }

    /// Depthwise weight `(c, 1, k, k)` with bias.
    pub fn declare_depthwise(store: &mut ParamStore, prefix: &str, c: usize, k: usize, init: &mut Initializer) -> Result<()> {
        Self::declare(store, prefix, c, 1, k, true, init)
    }

    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: b.get(&path(prefix, "weight"))?,
            bias: b.get(&path(prefix, "bias")).ok(),
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var, stride: usize, padding: Padding) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, stride, padding)
    }

    pub fn apply_depthwise(&self, g: &mut Graph, x: Var, padding: Padding) -> Result<Var> {
        g.dwconv2d(x, self.weight, self.bias, padding)
    }
}

/// Per-channel `(1, c, 1, 1)` scaling factor, zero at initialization.
fn declare_gamma(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(path(prefix, "gamma"), Tensor::zeros(Shape::new(1, c, 1, 1)))
}

#[derive(Clone, Copy, Debug)]
pub struct ShParams {
    pub conv: ConvParams,
    pub gamma: Var,
}

impl ShParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, c: usize, init: &mut Initializer) -> Result<()> {
        ConvParams::declare(store, &path(prefix, "conv"), c, c, 1, true, init)?;
        declare_gamma(store, prefix, c)
    }

    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            conv: ConvParams::bind(b, &path(prefix, "conv"))?,
            gamma: b.get(&path(prefix, "gamma"))?,
        })
    }
}

/// `Z = GELU(Y + γ_s ⊗ (Y − GAP(Y)))` with `Y = Conv1×1(X)`.
pub fn spatial_harmonization(g: &mut Graph, x: Var, p: &ShParams) -> Result<Var> {
    let y = p.conv.apply(g, x, 1, Padding::Valid)?;
    let pooled = g.gap(y)?;
    let detail = g.sub(y, pooled)?;
    let reweighted = g.mul(p.gamma, detail)?;
    let sum = g.add(y, reweighted)?;
    g.gelu(sum)
}

/// Gated context aggregation. With both switches on this is the full prior
/// aggregation block; `priors = false` drops the B/DCP context channels and
/// `gate = None` drops the `SiLU(Conv1×1(X))` gate.
#[derive(Clone, Copy, Debug)]
pub struct PaParams {
    pub dw: ConvParams,
    pub context: ConvParams,
    pub gate: Option<ConvParams>,
    pub priors: bool,
    pub window: PriorWindow,
}

impl PaParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, c: usize, priors: bool, gating: bool, init: &mut Initializer) -> Result<()> {
        ConvParams::declare_depthwise(store, &path(prefix, "dw"), c, 5, init)?;
        let ctx_in = if priors { c + 2 } else { c };
        ConvParams::declare(store, &path(prefix, "context"), c, ctx_in, 1, true, init)?;
        if gating {
            ConvParams::declare(store, &path(prefix, "gate"), c, c, 1, true, init)?;
        }
        Ok(())
    }

    pub fn bind(b: &Bound, prefix: &str, priors: bool, gating: bool, window: PriorWindow) -> Result<Self> {
        Ok(Self {
            dw: ConvParams::bind(b, &path(prefix, "dw"))?,
            context: ConvParams::bind(b, &path(prefix, "context"))?,
            gate: if gating { Some(ConvParams::bind(b, &path(prefix, "gate"))?) } else { None },
            priors,
            window,
        })
    }
}

/// `Z = SiLU(Conv1×1(X)) ⊗ SiLU(Conv1×1(Concat(B(X_d), D(X_d), X_d)))` with
/// `X_d = DW5×5(X)`.
pub fn prior_aggregation(g: &mut Graph, x: Var, p: &PaParams) -> Result<Var> {
    let xd = p.dw.apply_depthwise(g, x, Padding::Reflect)?;
    let ctx = if p.priors {
        let bright = g.bright_channel(xd, p.window)?;
        let dark = g.dark_channel(xd, p.window)?;
        g.concat(&[bright, dark, xd])?
    } else {
        xd
    };
    let ctx = p.context.apply(g, ctx, 1, Padding::Valid)?;
    let ctx = g.silu(ctx)?;
    match &p.gate {
        Some(gate) => {
            let gv = gate.apply(g, x, 1, Padding::Valid)?;
            let gv = g.silu(gv)?;
            g.mul(gv, ctx)
        }
        None => Ok(ctx),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChParams {
    pub norm_scale: Var,
    pub norm_shift: Var,
    pub proj_in: ConvParams,
    pub dw: ConvParams,
    /// Channel-reducing projection `W_r`, weight `(1, c, 1, 1)`.
    pub reduce: Var,
    pub gamma: Var,
    pub proj_out: ConvParams,
}

impl ChParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, c: usize, init: &mut Initializer) -> Result<()> {
        store.insert(path(prefix, "norm.scale"), Tensor::ones(Shape::new(1, c, 1, 1)))?;
        store.insert(path(prefix, "norm.shift"), Tensor::zeros(Shape::new(1, c, 1, 1)))?;
        ConvParams::declare(store, &path(prefix, "proj_in"), c, c, 1, true, init)?;
        ConvParams::declare_depthwise(store, &path(prefix, "dw"), c, 3, init)?;
        ConvParams::declare(store, &path(prefix, "reduce"), 1, c, 1, false, init)?;
        declare_gamma(store, prefix, c)?;
        ConvParams::declare(store, &path(prefix, "proj_out"), c, c, 1, true, init)
    }

    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            norm_scale: b.get(&path(prefix, "norm.scale"))?,
            norm_shift: b.get(&path(prefix, "norm.shift"))?,
            proj_in: ConvParams::bind(b, &path(prefix, "proj_in"))?,
            dw: ConvParams::bind(b, &path(prefix, "dw"))?,
            reduce: b.get(&path(prefix, "reduce.weight"))?,
            gamma: b.get(&path(prefix, "gamma"))?,
            proj_out: ConvParams::bind(b, &path(prefix, "proj_out"))?,
        })
    }
}

/// The inner harmonization `CH(Y) = Y + γ_c ⊗ (Y − GELU(Y·W_r))`.
pub fn channel_harmonization(g: &mut Graph, y: Var, reduce: Var, gamma: Var) -> Result<Var> {
    let squeezed = g.conv2d(y, reduce, None, 1, Padding::Valid)?;
    let squeezed = g.gelu(squeezed)?;
    let detail = g.sub(y, squeezed)?;
    let reweighted = g.mul(gamma, detail)?;
    g.add(y, reweighted)
}

/// `Z = Conv1×1(CH(GELU(DW3×3(Conv1×1(Norm(X)))))) + X`.
pub fn channel_harmonization_block(g: &mut Graph, x: Var, p: &ChParams) -> Result<Var> {
    let y = g.layer_norm(x, p.norm_scale, p.norm_shift, NORM_EPS)?;
    let y = p.proj_in.apply(g, y, 1, Padding::Valid)?;
    let y = p.dw.apply_depthwise(g, y, Padding::Reflect)?;
    let y = g.gelu(y)?;
    let y = channel_harmonization(g, y, p.reduce, p.gamma)?;
    let y = p.proj_out.apply(g, y, 1, Padding::Valid)?;
    g.add(y, x)
}

#[derive(Clone, Copy, Debug)]
pub struct SandwichParams {
    pub dw: ConvParams,
    pub fuse_bright: ConvParams,
    pub fuse_dark: ConvParams,
    pub window: PriorWindow,
}

impl SandwichParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, c: usize, init: &mut Initializer) -> Result<()> {
        ConvParams::declare_depthwise(store, &path(prefix, "dw"), c, 3, init)?;
        ConvParams::declare(store, &path(prefix, "fuse_bright"), c, 2, 3, true, init)?;
        ConvParams::declare(store, &path(prefix, "fuse_dark"), c, 2, 3, true, init)
    }

    pub fn bind(b: &Bound, prefix: &str, window: PriorWindow) -> Result<Self> {
        Ok(Self {
            dw: ConvParams::bind(b, &path(prefix, "dw"))?,
            fuse_bright: ConvParams::bind(b, &path(prefix, "fuse_bright"))?,
            fuse_dark: ConvParams::bind(b, &path(prefix, "fuse_dark"))?,
            window,
        })
    }
}

/// `F_s = DW(F) ⊗ (F_B + F_D) + DW(F)` where `F_B = Conv([B(F), M])`,
/// `F_D = Conv([D(F), M])` and `M` is the per-pixel channel mean.
pub fn sandwich_module(g: &mut Graph, f: Var, p: &SandwichParams) -> Result<Var> {
    let m = g.channel_mean(f)?;
    let bright = g.bright_channel(f, p.window)?;
    let dark = g.dark_channel(f, p.window)?;
    let bm = g.concat(&[bright, m])?;
    let dm = g.concat(&[dark, m])?;
    let fb = p.fuse_bright.apply(g, bm, 1, Padding::Reflect)?;
    let fd = p.fuse_dark.apply(g, dm, 1, Padding::Reflect)?;
    let attention = g.add(fb, fd)?;
    let local = p.dw.apply_depthwise(g, f, Padding::Reflect)?;
    let modulated = g.mul(local, attention)?;
    g.add(modulated, local)
}

/// Cosine similarity of every channel's histogram to the equalized histogram
/// of the whole sample, one row per sample. All histograms share the
/// sample's min-max range and `levels` bins. `None` marks a constant sample.
pub fn hegm_scores(f: &Tensor, levels: usize) -> Result<Vec<Option<Vec<f64>>>> {
    let s = f.shape();
    let mut rows = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let sample = f.sample(n);
        let eq = equalize(sample, levels)?;
        if eq.degenerate {
            rows.push(None);
            continue;
        }
        let lo = sample.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut scores = Vec::with_capacity(s.c);
        for c in 0..s.c {
            let pc = histogram(f.plane(n, c), levels, lo, hi)?;
            scores.push(cosine_similarity(pc.probs(), eq.output.probs())?);
        }
        rows.push(Some(scores));
    }
    Ok(rows)
}

/// Softmax across channels scaled by the channel count, so weights average
/// to one.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let c = scores.len() as f64;
    exps.iter().map(|e| e / total * c).collect()
}

/// Histogram-derived channel weights `NormA(Sim(p_c, p_F̄))`, shape
/// `(n, c, 1, 1)`. Constant samples get unit weights.
pub fn hegm_weights(f: &Tensor, levels: usize) -> Result<Tensor> {
    let s = f.shape();
    let mut data = Vec::with_capacity(s.n * s.c);
    for row in hegm_scores(f, levels)? {
        match row {
            Some(scores) => data.extend(normalize_scores(&scores)),
            None => data.extend(std::iter::repeat_n(1.0, s.c)),
        }
    }
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data)
}

/// `F_H = F ⊗ F″ + F` for a given attention `F″` broadcastable to `F`.
pub fn hegm_apply(g: &mut Graph, f: Var, attention: Var) -> Result<Var> {
    let scaled = g.mul(f, attention)?;
    g.add(scaled, f)
}

/// Histogram-equalization guided reweighting with
/// `F″ = NormA(scores) ⊗ sigmoid(GAP(F))`. The histogram path is a constant
/// on the graph; only the pooled branch carries gradient.
pub fn hegm(g: &mut Graph, f: Var, levels: usize) -> Result<Var> {
    let weights = hegm_weights(g.value(f), levels)?;
    let weights = g.constant(weights);
    let pooled = g.gap(f)?;
    let pooled = g.sigmoid(pooled)?;
    let attention = g.mul(weights, pooled)?;
    hegm_apply(g, f, attention)
}
