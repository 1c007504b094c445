//! The three-scale encoder-decoder with its prior-guided bottleneck, plus
//! model checkpoints.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::blocks::{
    channel_harmonization_block, hegm, prior_aggregation, sandwich_module, spatial_harmonization, ChParams, ConvParams,
    PaParams, SandwichParams, ShParams,
};
use crate::config::{join_list, parse_bool, parse_kv, parse_list, parse_value};
use crate::error::{invalid, Error, Result};
use crate::params::{Bound, Initializer, ParamStore};
use crate::priors::PriorWindow;
use crate::tensor::{reflect_index, Padding, Shape, Tensor};

/// Which blocks are present. A disabled block is removed from the network
/// together with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockFlags {
    pub gating: bool,
    pub pa: bool,
    pub sh: bool,
    pub ch: bool,
    pub sm: bool,
    pub hegm: bool,
}

impl BlockFlags {
    pub const ALL: Self = Self {
        gating: true,
        pa: true,
        sh: true,
        ch: true,
        sm: true,
        hegm: true,
    };
}

impl Default for BlockFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BottleneckMode {
    /// `f + SM(f) + HEGM(f)`.
    Parallel,
    /// `HEGM(SM(f))`.
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub base_width: usize,
    pub enc_blocks: [usize; 3],
    pub dec_blocks: [usize; 2],
    pub bottleneck_depth: usize,
    pub flags: BlockFlags,
    pub prior_window: usize,
    pub hist_levels: usize,
    pub bottleneck: BottleneckMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            enc_blocks: [2, 2, 2],
            dec_blocks: [2, 2],
            bottleneck_depth: 1,
            flags: BlockFlags::ALL,
            prior_window: 3,
            hist_levels: 64,
            bottleneck: BottleneckMode::Parallel,
        }
    }
}

impl ArchConfig {
    pub fn widths(&self) -> [usize; 3] {
        let c = self.base_width;
        [c, 2 * c, 4 * c]
    }

    pub fn window(&self) -> Result<PriorWindow> {
        PriorWindow::new(self.prior_window)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(invalid("base_width must be positive"));
        }
        self.window()?;
        if self.hist_levels < 2 {
            return Err(invalid("hist_levels must be at least 2"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "base_width" => self.base_width = parse_value(key, value)?,
            "enc_blocks" => self.enc_blocks = parse_list(key, value)?,
            "dec_blocks" => self.dec_blocks = parse_list(key, value)?,
            "bottleneck_depth" => self.bottleneck_depth = parse_value(key, value)?,
            "prior_window" => self.prior_window = parse_value(key, value)?,
            "hist_levels" => self.hist_levels = parse_value(key, value)?,
            "bottleneck_mode" => {
                self.bottleneck = match value {
                    "parallel" => BottleneckMode::Parallel,
                    "sequential" => BottleneckMode::Sequential,
                    _ => return Err(Error::Config(format!("bottleneck_mode: unknown mode {value:?}"))),
                }
            }
            "enable_gating" => self.flags.gating = parse_bool(key, value)?,
            "enable_pa" => self.flags.pa = parse_bool(key, value)?,
            "enable_sh" => self.flags.sh = parse_bool(key, value)?,
            "enable_ch" => self.flags.ch = parse_bool(key, value)?,
            "enable_sm" => self.flags.sm = parse_bool(key, value)?,
            "enable_hegm" => self.flags.hegm = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv_text(&self) -> String {
        let mode = match self.bottleneck {
            BottleneckMode::Parallel => "parallel",
            BottleneckMode::Sequential => "sequential",
        };
        let f = self.flags;
        format!(
            "base_width = {}\nenc_blocks = {}\ndec_blocks = {}\nbottleneck_depth = {}\nprior_window = {}\n\
             hist_levels = {}\nbottleneck_mode = {mode}\nenable_gating = {}\nenable_pa = {}\nenable_sh = {}\n\
             enable_ch = {}\nenable_sm = {}\nenable_hegm = {}\n",
            self.base_width,
            join_list(&self.enc_blocks),
            join_list(&self.dec_blocks),
            self.bottleneck_depth,
            self.prior_window,
            self.hist_levels,
            f.gating,
            f.pa,
            f.sh,
            f.ch,
            f.sm,
            f.hegm
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown architecture key {k}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All learnable parameters plus the architecture that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

fn declare_stage(store: &mut ParamStore, prefix: &str, blocks: usize, c: usize, flags: BlockFlags, init: &mut Initializer) -> Result<()> {
    for b in 0..blocks {
        let p = format!("{prefix}.{b}");
        if flags.sh {
            ShParams::declare(store, &format!("{p}.sh"), c, init)?;
        }
        if flags.pa || flags.gating {
            PaParams::declare(store, &format!("{p}.pa"), c, flags.pa, flags.gating, init)?;
        }
        if flags.ch {
            ChParams::declare(store, &format!("{p}.ch"), c, init)?;
        }
    }
    Ok(())
}

fn declare_head(store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), Tensor::zeros(Shape::new(3, c, 3, 3)))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(Shape::new(1, 3, 1, 1)))
}

/// Builds a freshly initialized model: fan-in uniform convolutions, zero
/// biases, zero harmonization scales and zero output heads.
pub fn build(cfg: &ArchConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let [c1, c2, c3] = cfg.widths();
    let widths = [c1, c2, c3];
    let f = cfg.flags;
    let mut init = Initializer::new(seed);
    let mut s = ParamStore::new();

    ConvParams::declare(&mut s, "stem", c1, 3, 3, true, &mut init)?;
    for scale in 0..3 {
        declare_stage(&mut s, &format!("enc.{scale}"), cfg.enc_blocks[scale], widths[scale], f, &mut init)?;
        if scale < 2 {
            ConvParams::declare(&mut s, &format!("down.{scale}"), widths[scale + 1], widths[scale], 3, true, &mut init)?;
        }
    }
    if f.sm {
        for i in 0..cfg.bottleneck_depth {
            SandwichParams::declare(&mut s, &format!("bottleneck.{i}.sm"), c3, &mut init)?;
        }
    }
    for (i, (from, to)) in [(c3, c2), (c2, c1)].into_iter().enumerate() {
        ConvParams::declare(&mut s, &format!("up.{i}"), to, from, 3, true, &mut init)?;
        ConvParams::declare(&mut s, &format!("fuse.{i}"), to, 2 * to, 1, true, &mut init)?;
        declare_stage(&mut s, &format!("dec.{i}"), cfg.dec_blocks[i], to, f, &mut init)?;
    }
    declare_head(&mut s, "head.1", c1)?;
    declare_head(&mut s, "head.2", c2)?;
    declare_head(&mut s, "head.3", c3)?;

    Ok(ModelState {
        arch: cfg.clone(),
        params: s,
    })
}

pub fn param_count(cfg: &ArchConfig) -> Result<usize> {
    Ok(build(cfg, 0)?.params.count())
}

fn stage(g: &mut Graph, b: &Bound, arch: &ArchConfig, prefix: &str, blocks: usize, mut x: Var) -> Result<Var> {
    let f = arch.flags;
    let window = arch.window()?;
    for i in 0..blocks {
        let p = format!("{prefix}.{i}");
        if f.sh || f.pa || f.gating {
            let mut y = x;
            if f.sh {
                y = spatial_harmonization(g, y, &ShParams::bind(b, &format!("{p}.sh"))?)?;
            }
            if f.pa || f.gating {
                let pa = PaParams::bind(b, &format!("{p}.pa"), f.pa, f.gating, window)?;
                y = prior_aggregation(g, y, &pa)?;
            }
            x = g.add(x, y)?;
        }
        if f.ch {
            x = channel_harmonization_block(g, x, &ChParams::bind(b, &format!("{p}.ch"))?)?;
        }
    }
    Ok(x)
}

fn bottleneck(g: &mut Graph, b: &Bound, arch: &ArchConfig, mut f: Var) -> Result<Var> {
    let window = arch.window()?;
    for i in 0..arch.bottleneck_depth {
        let sm = if arch.flags.sm {
            Some(SandwichParams::bind(b, &format!("bottleneck.{i}.sm"), window)?)
        } else {
            None
        };
        match arch.bottleneck {
            BottleneckMode::Parallel => {
                let mut acc = f;
                if let Some(sm) = &sm {
                    let s = sandwich_module(g, f, sm)?;
                    acc = g.add(acc, s)?;
                }
                if arch.flags.hegm {
                    let h = hegm(g, f, arch.hist_levels)?;
                    acc = g.add(acc, h)?;
                }
                f = acc;
            }
            BottleneckMode::Sequential => {
                if let Some(sm) = &sm {
                    f = sandwich_module(g, f, sm)?;
                }
                if arch.flags.hegm {
                    f = hegm(g, f, arch.hist_levels)?;
                }
            }
        }
    }
    Ok(f)
}

fn head(g: &mut Graph, b: &Bound, name: &str, feat: Var, base: Var) -> Result<Var> {
    let residual = ConvParams::bind(b, name)?.apply(g, feat, 1, Padding::Reflect)?;
    g.add(residual, base)
}

pub fn check_input(shape: Shape) -> Result<()> {
    if shape.c != 3 {
        return Err(invalid(format!("network input must have 3 channels, got {shape}")));
    }
    if !shape.h.is_multiple_of(4) || !shape.w.is_multiple_of(4) || shape.h == 0 || shape.w == 0 {
        return Err(invalid(format!("network input height and width must be divisible by 4, got {shape}")));
    }
    Ok(())
}

/// Forward pass on an existing graph. Returns the full, half and quarter
/// resolution restorations, each a residual over the area-downsampled input.
pub fn forward_graph(g: &mut Graph, b: &Bound, arch: &ArchConfig, hazy: Var) -> Result<[Var; 3]> {
    check_input(g.shape(hazy))?;
    let stem = ConvParams::bind(b, "stem")?.apply(g, hazy, 1, Padding::Zero)?;
    let e1 = stage(g, b, arch, "enc.0", arch.enc_blocks[0], stem)?;
    let d = ConvParams::bind(b, "down.0")?.apply(g, e1, 2, Padding::Reflect)?;
    let e2 = stage(g, b, arch, "enc.1", arch.enc_blocks[1], d)?;
    let d = ConvParams::bind(b, "down.1")?.apply(g, e2, 2, Padding::Reflect)?;
    let e3 = stage(g, b, arch, "enc.2", arch.enc_blocks[2], d)?;
    let deep = bottleneck(g, b, arch, e3)?;

    let hazy2 = g.down2(hazy)?;
    let hazy3 = g.down2(hazy2)?;
    let out3 = head(g, b, "head.3", deep, hazy3)?;

    let mut feat = deep;
    let mut outs = Vec::with_capacity(2);
    for (i, skip) in [e2, e1].into_iter().enumerate() {
        let up = g.up2(feat)?;
        let up = ConvParams::bind(b, &format!("up.{i}"))?.apply(g, up, 1, Padding::Reflect)?;
        let cat = g.concat(&[up, skip])?;
        let fused = ConvParams::bind(b, &format!("fuse.{i}"))?.apply(g, cat, 1, Padding::Valid)?;
        feat = stage(g, b, arch, &format!("dec.{i}"), arch.dec_blocks[i], fused)?;
        let (name, base) = if i == 0 { ("head.2", hazy2) } else { ("head.1", hazy) };
        outs.push(head(g, b, name, feat, base)?);
    }
    Ok([outs[1], outs[0], out3])
}

impl ModelState {
    /// Inference on a `(n, 3, h, w)` batch.
    pub fn forward(&self, hazy: &Tensor) -> Result<[Tensor; 3]> {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &self.params);
        let x = g.constant(hazy.clone());
        let outs = forward_graph(&mut g, &b, &self.arch, x)?;
        Ok(outs.map(|v| g.value(v).clone()))
    }

    /// Full-resolution restoration of an image of any size: the input is
    /// reflect-padded up to a multiple of 4 and the output cropped back.
    pub fn dehaze(&self, hazy: &Tensor) -> Result<Tensor> {
        let s = hazy.shape();
        let (h, w) = (s.h.div_ceil(4) * 4, s.w.div_ceil(4) * 4);
        if (h, w) == (s.h, s.w) {
            let [full, _, _] = self.forward(hazy)?;
            return Ok(full);
        }
        if s.h == 0 || s.w == 0 {
            return Err(invalid(format!("cannot dehaze an empty image {s}")));
        }
        let padded = Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
            hazy.at(n, c, reflect_index(y as isize, s.h), reflect_index(x as isize, s.w))
        });
        let [full, _, _] = self.forward(&padded)?;
        Ok(Tensor::from_fn(s, |n, c, y, x| full.at(n, c, y, x)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, self)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let state = read_checkpoint(&mut bytes.as_slice()).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })?;
        let reference = build(&state.arch, 0)?;
        check_layout(&reference.params, &state.params).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(state)
    }

    /// Loads a checkpoint that must fit `expected`; a mismatch names the
    /// first parameter path whose shape differs.
    pub fn load_for(path: impl AsRef<Path>, expected: &ArchConfig) -> Result<Self> {
        let path = path.as_ref();
        let state = Self::load(path)?;
        let reference = build(expected, 0)?;
        check_layout(&reference.params, &state.params).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(state)
    }
}

fn check_layout(expected: &ParamStore, actual: &ParamStore) -> std::result::Result<(), String> {
    for (name, t) in expected.iter() {
        match actual.get(name) {
            None => return Err(format!("shape mismatch at {name}: expected {}, missing from file", t.shape())),
            Some(a) if a.shape() != t.shape() => {
                return Err(format!("shape mismatch at {name}: expected {}, found {}", t.shape(), a.shape()))
            }
            _ => {}
        }
    }
    if let Some(extra) = actual.names().find(|n| expected.get(n).is_none()) {
        return Err(format!("unexpected parameter {extra}"));
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGH2";
pub const CHECKPOINT_VERSION: u32 = 1;

// Layout (all integers little-endian):
//   "PGH2" | u32 version | u32 len + UTF-8 architecture text | u32 count |
//   count × (u32 len + UTF-8 path | 4 × u32 shape | numel × f64)
fn write_checkpoint(w: &mut impl Write, state: &ModelState) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_str(w, &state.arch.to_kv_text())?;
    write_records(w, &state.params)
}

/// `u32 count` followed by `(u32 len + path | 4 × u32 shape | f64 data)`
/// records in path order.
pub(crate) fn write_records(w: &mut impl Write, store: &ParamStore) -> io::Result<()> {
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        write_str(w, name)?;
        for d in t.shape().dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| "truncated file".to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> std::result::Result<String, String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(format!("implausible string length {len}"));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|_| "truncated file".to_string())?;
    String::from_utf8(b).map_err(|_| "invalid UTF-8 in string field".to_string())
}

fn read_checkpoint(r: &mut impl Read) -> std::result::Result<ModelState, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| "truncated file".to_string())?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {magic:?}, expected \"PGH2\""));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let arch = ArchConfig::from_kv_text(&read_string(r)?).map_err(|e| format!("architecture header: {e}"))?;
    let params = read_records(r)?;
    expect_end(r)?;
    Ok(ModelState { arch, params })
}

pub(crate) fn expect_end(r: &mut impl Read) -> std::result::Result<(), String> {
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after last record".into());
    }
    Ok(())
}

pub(crate) fn read_records(r: &mut impl Read) -> std::result::Result<ParamStore, String> {
    let count = read_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_string(r)?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let shape = Shape::from_dims(dims);
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none_or(|n| n > 1 << 28) {
            return Err(format!("implausible shape {shape} for {name}"));
        }
        let mut raw = vec![0u8; shape.numel() * 8];
        r.read_exact(&mut raw).map_err(|_| format!("truncated data for {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.insert(name, t).map_err(|e| e.to_string())?;
    }
    Ok(params)
}
