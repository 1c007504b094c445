//! Adam with cosine annealing, the training loop, checkpoints and
//! evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph};
use crate::config::{parse_kv, parse_value};
use crate::data::{load_ppm, read_manifest, HazeRanges, SyntheticSet};
use crate::error::{invalid, Error, Result};
use crate::network::{self, build, read_records, read_u32, write_records, ArchConfig, ModelState};
use crate::objectives::{loss_total, mean_ssim, psnr, target_pyramid, FrequencyNorm, LossTerms, LossWeights};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// `lr(s) = lr_final + ½(lr_init − lr_final)(1 + cos(π·s/total))`, with `s`
/// clamped to `total`.
pub fn cosine_lr(step: usize, lr_init: f64, lr_final: f64, total: usize) -> f64 {
    let frac = step.min(total) as f64 / total.max(1) as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (k, t) in params.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape())).expect("names are unique");
            }
            s
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

fn same_keys(params: &ParamStore, other: &ParamStore, what: &str) -> Result<()> {
    if let Some(k) = params.names().find(|k| other.get(k).is_none()) {
        return Err(invalid(format!("{what} is missing parameter {k}")));
    }
    if let Some(k) = other.names().find(|k| params.get(k).is_none()) {
        return Err(invalid(format!("{what} has unknown parameter {k}")));
    }
    for (k, t) in params.iter() {
        let o = other.get(k).expect("checked above");
        if o.shape() != t.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: t.shape(),
                right: o.shape(),
            });
        }
    }
    Ok(())
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, opt: &mut OptState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    same_keys(params, grads, "gradients")?;
    same_keys(params, &opt.m, "optimizer state")?;
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("keys checked").data();
        let m = opt.m.get_mut(name).expect("keys checked").data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = opt.v.get_mut(name).expect("keys checked").data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (opt.m.get(name).expect("keys checked").data(), opt.v.get(name).expect("keys checked").data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Gradients of every bound parameter, keyed by path.
pub fn named_gradients(bound: &Bound, grads: &Gradients) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, &var) in bound.iter() {
        let g = grads
            .get(var)
            .ok_or_else(|| invalid(format!("no gradient for parameter {name}")))?;
        out.insert(name.clone(), g.clone())?;
    }
    Ok(out)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

const OPT_MAGIC: &[u8; 4] = b"PGHO";

pub fn save_opt_state(opt: &OptState, iter: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(OPT_MAGIC);
    buf.extend_from_slice(&network::CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&opt.step.to_le_bytes());
    buf.extend_from_slice(&(iter as u64).to_le_bytes());
    write_records(&mut buf, &opt.m)?;
    write_records(&mut buf, &opt.v)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Returns the optimizer state and the number of completed iterations.
pub fn load_opt_state(path: impl AsRef<Path>) -> Result<(OptState, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let parse = |r: &mut &[u8]| -> std::result::Result<(OptState, usize), String> {
        let mut magic = [0u8; 4];
        std::io::Read::read_exact(r, &mut magic).map_err(|_| "truncated file".to_string())?;
        if &magic != OPT_MAGIC {
            return Err(format!("bad magic {magic:?}, expected \"PGHO\""));
        }
        let version = read_u32(r)?;
        if version != network::CHECKPOINT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let lo = read_u32(r)? as u64;
        let step = lo | (read_u32(r)? as u64) << 32;
        let lo = read_u32(r)? as u64;
        let iter = lo | (read_u32(r)? as u64) << 32;
        let m = read_records(r)?;
        let v = read_records(r)?;
        network::expect_end(r)?;
        Ok((OptState { step, m, v }, iter as usize))
    };
    parse(&mut bytes.as_slice()).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_iters: usize,
    pub batch: usize,
    pub flip_prob: f64,
    pub weights: LossWeights,
    pub freq_norm: FrequencyNorm,
    pub adam: AdamConfig,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub num_pairs: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub haze: HazeRanges,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub log_path: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            lr_init: 8e-4,
            lr_final: 1e-6,
            total_iters: 2000,
            batch: 8,
            flip_prob: 0.5,
            weights: LossWeights::default(),
            freq_norm: FrequencyNorm::Parts,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            num_pairs: 64,
            image_size: 80,
            patch_size: 64,
            haze: HazeRanges::default(),
            checkpoint_dir: None,
            checkpoint_every: 0,
            log_path: None,
            resume_from: None,
        }
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    /// Parses `key = value` text on top of the defaults. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "lr_init" => self.lr_init = parse_value(k, v)?,
            "lr_final" => self.lr_final = parse_value(k, v)?,
            "total_iters" => self.total_iters = parse_value(k, v)?,
            "batch" => self.batch = parse_value(k, v)?,
            "flip_prob" => self.flip_prob = parse_value(k, v)?,
            "lambda1" => self.weights.frequency = parse_value(k, v)?,
            "lambda2" => self.weights.ssim = parse_value(k, v)?,
            "lambda3" => self.weights.sparsity = parse_value(k, v)?,
            "freq_norm" => {
                self.freq_norm = match v {
                    "parts" => FrequencyNorm::Parts,
                    "magnitude" => FrequencyNorm::Magnitude,
                    _ => return Err(Error::Config(format!("freq_norm: unknown norm {v:?}"))),
                }
            }
            "beta1" => self.adam.beta1 = parse_value(k, v)?,
            "beta2" => self.adam.beta2 = parse_value(k, v)?,
            "adam_eps" => self.adam.eps = parse_value(k, v)?,
            "grad_clip" => self.grad_clip = parse_value(k, v)?,
            "seed" => self.seed = parse_value(k, v)?,
            "num_pairs" => self.num_pairs = parse_value(k, v)?,
            "image_size" => self.image_size = parse_value(k, v)?,
            "patch_size" => self.patch_size = parse_value(k, v)?,
            "airlight_min" => self.haze.airlight.0 = parse_value(k, v)?,
            "airlight_max" => self.haze.airlight.1 = parse_value(k, v)?,
            "beta_min" => self.haze.beta.0 = parse_value(k, v)?,
            "beta_max" => self.haze.beta.1 = parse_value(k, v)?,
            "checkpoint_dir" => self.checkpoint_dir = opt_path(v),
            "checkpoint_every" => self.checkpoint_every = parse_value(k, v)?,
            "log_path" => self.log_path = opt_path(v),
            "resume_from" => self.resume_from = opt_path(v),
            _ => {
                if !self.arch.set(k, v)? {
                    return Err(Error::Config(format!("unknown key {k}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.arch.validate()?;
        self.weights.validate()?;
        self.haze.validate()?;
        if !(self.lr_final < self.lr_init) || !(self.lr_final >= 0.0) {
            return fail(format!("need 0 <= lr_final < lr_init, got {} and {}", self.lr_final, self.lr_init));
        }
        if self.total_iters == 0 || self.batch == 0 || self.num_pairs == 0 {
            return fail("total_iters, batch and num_pairs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob must be in [0, 1], got {}", self.flip_prob));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        let p = self.patch_size;
        if p == 0 || !p.is_power_of_two() || p < 4 || p > self.image_size {
            return fail(format!(
                "patch_size must be a power of two between 4 and image_size ({}), got {p}",
                self.image_size
            ));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        cosine_lr(step, self.lr_init, self.lr_final, self.total_iters)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

impl LogRow {
    pub const HEADER: &'static str = "iter,lr,total,spatial,frequency,ssim,reg";

    pub fn csv(&self) -> String {
        let t = &self.terms;
        format!("{},{},{},{},{},{},{}", self.iter, self.lr, t.total, t.spatial, t.frequency, t.ssim, t.reg)
    }
}

/// Training state: model, optimizer, synthetic corpus and the number of
/// completed iterations.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub opt: OptState,
    pub data: SyntheticSet,
    pub iter: usize,
    pub best_psnr: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = SyntheticSet::generate(cfg.num_pairs, cfg.image_size, cfg.seed, &cfg.haze)?;
        let (model, opt, iter) = match &cfg.resume_from {
            Some(path) => {
                let model = ModelState::load_for(path, &cfg.arch)?;
                let (opt, iter) = load_opt_state(opt_file(path))?;
                same_keys(&model.params, &opt.m, "optimizer state")?;
                (model, opt, iter)
            }
            None => {
                let model = build(&cfg.arch, cfg.seed)?;
                let opt = OptState::new(&model.params);
                (model, opt, 0)
            }
        };
        Ok(Self {
            cfg,
            model,
            opt,
            data,
            iter,
            best_psnr: f64::NEG_INFINITY,
        })
    }

    /// One optimization step. The batch depends only on the seed and the
    /// iteration index, so a resumed run replays the same samples.
    pub fn step(&mut self) -> Result<LogRow> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(self.iter as u64 + 1);
        let (hazy, clean) = self.data.batch(cfg.batch, cfg.patch_size, cfg.flip_prob, &mut rng)?;

        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &self.model.params);
        let x = g.constant(hazy);
        let preds = network::forward_graph(&mut g, &bound, &cfg.arch, x)?;
        let y = g.constant(clean);
        let gts = target_pyramid(&mut g, y)?;
        let window = cfg.arch.window()?;
        let loss = loss_total(&mut g, &preds, &gts, &cfg.weights, cfg.freq_norm, window)?;
        let terms = loss.values(&g);
        if !terms.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iter,
                components: format!(
                    "total={} spatial={} frequency={} ssim={} reg={}",
                    terms.total, terms.spatial, terms.frequency, terms.ssim, terms.reg
                ),
            });
        }
        let grads = g.backward(loss.total)?;
        let mut grads = named_gradients(&bound, &grads)?;
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.lr(self.iter);
        adam_step(&mut self.model.params, &grads, &mut self.opt, lr, &cfg.adam)?;
        let row = LogRow {
            iter: self.iter,
            lr,
            terms,
        };
        self.iter += 1;
        Ok(row)
    }

    /// Saves `model.pgh` (plus optimizer state) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let path = dir.join("model.pgh");
        self.model.save(&path)?;
        save_opt_state(&self.opt, self.iter, opt_file(&path))?;
        Ok(path)
    }

    /// Mean PSNR of the full training images after dehazing.
    pub fn train_psnr(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.data.samples {
            total += psnr(&self.model.dehaze(&s.hazy)?, &s.clean, 1.0)?;
        }
        Ok(total / self.data.len() as f64)
    }

    /// Runs until `total_iters`, logging every step and checkpointing every
    /// `checkpoint_every` steps. Each checkpoint also refreshes `best.pgh`
    /// when the training-set PSNR improved.
    pub fn run(&mut self) -> Result<Vec<LogRow>> {
        self.run_until(self.cfg.total_iters)
    }

    /// Like [`Trainer::run`] but stops after iteration `end` (capped at
    /// `total_iters`); the schedule still follows `total_iters`.
    pub fn run_until(&mut self, end: usize) -> Result<Vec<LogRow>> {
        let end = end.min(self.cfg.total_iters);
        let mut log = match &self.cfg.log_path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                let resumed = self.iter > 0 && p.exists();
                let file = fs::OpenOptions::new().create(true).append(resumed).write(true).truncate(!resumed).open(p)?;
                let mut w = BufWriter::new(file);
                if !resumed {
                    writeln!(w, "{}", LogRow::HEADER)?;
                }
                Some(w)
            }
            None => None,
        };
        let mut rows = Vec::with_capacity(end.saturating_sub(self.iter));
        while self.iter < end {
            let row = self.step()?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            rows.push(row);
            let every = self.cfg.checkpoint_every;
            let done = self.iter == end;
            if let Some(dir) = self.cfg.checkpoint_dir.clone() {
                if (every > 0 && self.iter.is_multiple_of(every)) || done {
                    self.save(&dir)?;
                    let score = self.train_psnr()?;
                    if score > self.best_psnr {
                        self.best_psnr = score;
                        self.model.save(dir.join("best.pgh"))?;
                    }
                }
            }
        }
        if let Some(mut w) = log {
            w.flush()?;
        }
        Ok(rows)
    }
}

/// Optimizer state lives next to the model file with an `.opt` suffix.
pub fn opt_file(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.image, r.psnr_db, r.ssim);
        }
        s
    }
}

/// Scores the full-resolution output against each clean image.
pub fn evaluate<'a>(model: &ModelState, pairs: impl IntoIterator<Item = (String, &'a Tensor, &'a Tensor)>) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for (image, clean, hazy) in pairs {
        let out = model.dehaze(hazy)?;
        rows.push(EvalRow {
            image,
            psnr_db: psnr(&out, clean, 1.0)?,
            ssim: mean_ssim(&out, clean)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty("evaluation"));
    }
    Ok(EvalReport { rows })
}

pub fn evaluate_set(model: &ModelState, set: &SyntheticSet) -> Result<EvalReport> {
    evaluate(
        model,
        set.samples.iter().enumerate().map(|(i, s)| (format!("synthetic_{i:04}"), &s.clean, &s.hazy)),
    )
}

/// Evaluates on the `clean hazy` pairs of a manifest file.
pub fn evaluate_manifest(model: &ModelState, manifest: impl AsRef<Path>) -> Result<EvalReport> {
    let pairs = read_manifest(manifest)?;
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation manifest"));
    }
    let mut loaded = Vec::with_capacity(pairs.len());
    for (clean, hazy) in &pairs {
        loaded.push((hazy.display().to_string(), load_ppm(clean)?, load_ppm(hazy)?));
    }
    evaluate(model, loaded.iter().map(|(n, c, h)| (n.clone(), c, h)))
}
