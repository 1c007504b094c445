mod common;

use common::{random, rng};
use pgh2net::objectives::psnr;
use pgh2net::train::{adam_step, clip_global_norm, cosine_lr, evaluate_set, load_opt_state, opt_file, save_opt_state, AdamConfig, OptState};
use pgh2net::{Error, ModelState, ParamStore, Shape, Tensor, TrainConfig, Trainer};
use std::path::Path;

fn tiny(extra: &str) -> TrainConfig {
    let mut cfg = TrainConfig::parse(
        "base_width = 2\nenc_blocks = 1,1,1\ndec_blocks = 1,1\nbatch = 2\nnum_pairs = 4\nimage_size = 20\npatch_size = 16\ntotal_iters = 6\nseed = 3",
    )
    .unwrap();
    for line in extra.lines() {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim()).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn adam_matches_the_scalar_recurrence() {
    let cfg = AdamConfig::default();
    let mut params = ParamStore::new();
    params.insert("a", Tensor::vector(&[0.5, -1.0])).unwrap();
    params.insert("b", Tensor::scalar(2.0)).unwrap();
    let mut opt = OptState::new(&params);
    let grads_at = |t: usize| {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::vector(&[0.3 * t as f64 - 0.5, 1e-3])).unwrap();
        g.insert("b", Tensor::scalar(-2.0 / (t as f64 + 1.0))).unwrap();
        g
    };
    // reference: one scalar at a time
    let mut refs = vec![(0.5, 0.0, 0.0), (-1.0, 0.0, 0.0), (2.0, 0.0, 0.0)];
    for t in 1..=8 {
        let lr = 0.01 * t as f64;
        let grads = grads_at(t);
        adam_step(&mut params, &grads, &mut opt, lr, &cfg).unwrap();
        let flat: Vec<f64> = grads.get("a").unwrap().data().iter().chain(grads.get("b").unwrap().data()).copied().collect();
        for ((p, m, v), g) in refs.iter_mut().zip(flat) {
            *m = 0.9 * *m + 0.1 * g;
            *v = 0.999 * *v + 0.001 * g * g;
            let mhat = *m / (1.0 - 0.9f64.powi(t as i32));
            let vhat = *v / (1.0 - 0.999f64.powi(t as i32));
            *p -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
        let got: Vec<f64> = params.get("a").unwrap().data().iter().chain(params.get("b").unwrap().data()).copied().collect();
        for (x, (p, _, _)) in got.iter().zip(&refs) {
            assert!((x - p).abs() < 1e-15, "step {t}: {x} vs {p}");
        }
    }
    assert_eq!(opt.step, 8);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut params = ParamStore::new();
    params.insert("a", Tensor::vector(&[1.0, 2.0])).unwrap();
    let mut opt = OptState::new(&params);
    let mut wrong = ParamStore::new();
    wrong.insert("a", Tensor::vector(&[1.0])).unwrap();
    assert!(adam_step(&mut params, &wrong, &mut opt, 0.1, &AdamConfig::default()).is_err());
    let mut extra = ParamStore::new();
    extra.insert("a", Tensor::vector(&[1.0, 1.0])).unwrap();
    extra.insert("z", Tensor::scalar(1.0)).unwrap();
    assert!(adam_step(&mut params, &extra, &mut opt, 0.1, &AdamConfig::default()).is_err());
    assert_eq!(opt.step, 0);
}

#[test]
fn cosine_schedule_shape() {
    assert_eq!(cosine_lr(0, 1e-3, 1e-5, 100), 1e-3);
    assert!((cosine_lr(100, 1e-3, 1e-5, 100) - 1e-5).abs() < 1e-18);
    assert!((cosine_lr(50, 1e-3, 1e-5, 100) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    assert_eq!(cosine_lr(500, 1e-3, 1e-5, 100), cosine_lr(100, 1e-3, 1e-5, 100));
    let mut last = f64::INFINITY;
    for s in 0..=100 {
        let lr = cosine_lr(s, 1e-3, 1e-5, 100);
        assert!(lr <= last);
        last = lr;
    }
}

#[test]
fn global_norm_clipping() {
    let mut g = ParamStore::new();
    g.insert("a", Tensor::vector(&[3.0, 0.0])).unwrap();
    g.insert("b", Tensor::scalar(4.0)).unwrap();
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g.get("a").unwrap().data(), &[3.0, 0.0]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g.get("a").unwrap().data()[0] - 0.6).abs() < 1e-15);
    assert!((g.get("b").unwrap().data()[0] - 0.8).abs() < 1e-15);
    assert_eq!(clip_global_norm(&mut g, 0.0), 1.0);
}

#[test]
fn optimizer_state_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut params = ParamStore::new();
    params.insert("w", random(&mut rng(1), Shape::new(2, 3, 1, 1), -1.0, 1.0)).unwrap();
    let mut opt = OptState::new(&params);
    let grads = {
        let mut g = ParamStore::new();
        g.insert("w", random(&mut rng(2), Shape::new(2, 3, 1, 1), -1.0, 1.0)).unwrap();
        g
    };
    adam_step(&mut params, &grads, &mut opt, 0.1, &AdamConfig::default()).unwrap();
    let path = dir.path().join("o.opt");
    save_opt_state(&opt, 17, &path).unwrap();
    let (back, iter) = load_opt_state(&path).unwrap();
    assert_eq!((back, iter), (opt, 17));
    std::fs::write(&path, b"PGHO").unwrap();
    assert!(load_opt_state(&path).is_err());
}

#[test]
fn config_parsing() {
    let cfg = tiny("lambda1 = 0.25\nlambda3 = 0\nfreq_norm = magnitude\nenable_hegm = false\nbottleneck_mode = sequential");
    assert_eq!(cfg.weights.frequency, 0.25);
    assert_eq!(cfg.weights.sparsity, 0.0);
    assert!(!cfg.arch.flags.hegm);
    assert_eq!(cfg.arch.bottleneck, pgh2net::BottleneckMode::Sequential);
    for bad in ["lambda1 = -1", "patch_size = 12", "patch_size = 32", "flip_prob = 2", "nonsense = 1", "batch = x", "seed = 1\nseed = 2"] {
        assert!(TrainConfig::parse(&format!("image_size = 20\npatch_size = 16\n{bad}")).is_err(), "{bad}");
    }
}

fn model_bytes(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("model.pgh")).unwrap()
}

#[test]
fn seeded_runs_are_bitwise_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut t = Trainer::new(tiny("")).unwrap();
        t.run().unwrap();
        t.save(d.path()).unwrap();
    }
    assert_eq!(model_bytes(dirs[0].path()), model_bytes(dirs[1].path()));
    let mut other = Trainer::new(tiny("seed = 4")).unwrap();
    other.run().unwrap();
    other.save(dirs[1].path()).unwrap();
    assert_ne!(model_bytes(dirs[0].path()), model_bytes(dirs[1].path()));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let straight = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny("")).unwrap();
    let full_rows = t.run().unwrap();
    t.save(straight.path()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let log = split.path().join("log.csv");
    let mut first = Trainer::new(tiny(&format!("log_path = {}", log.display()))).unwrap();
    first.run_until(2).unwrap();
    let saved = first.save(split.path()).unwrap();
    let mut cfg = tiny(&format!("resume_from = {}\nlog_path = {}", saved.display(), log.display()));
    cfg.checkpoint_dir = None;
    let mut second = Trainer::new(cfg).unwrap();
    assert_eq!(second.iter, 2);
    let rest = second.run().unwrap();
    second.save(split.path()).unwrap();

    assert_eq!(model_bytes(straight.path()), model_bytes(split.path()));
    assert_eq!(rest, full_rows[2..]);
    assert_eq!(std::fs::read(opt_file(&straight.path().join("model.pgh"))).unwrap(), std::fs::read(opt_file(&saved)).unwrap());

    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,lr,total,spatial,frequency,ssim,reg");
    assert_eq!(lines.len(), 7);
    let iters: Vec<usize> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters, (0..6).collect::<Vec<_>>());
}

#[test]
fn resume_rejects_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny("total_iters = 1")).unwrap();
    t.run().unwrap();
    let saved = t.save(dir.path()).unwrap();
    let err = Trainer::new(tiny(&format!("base_width = 3\nresume_from = {}", saved.display()))).err().unwrap();
    assert!(err.to_string().contains("shape mismatch at"), "{err}");
}

#[test]
fn zero_auxiliary_weights_leave_the_spatial_term() {
    let mut t = Trainer::new(tiny("lambda1 = 0\nlambda2 = 0\nlambda3 = 0")).unwrap();
    for _ in 0..3 {
        let row = t.step().unwrap();
        assert_eq!(row.terms.total, row.terms.spatial);
        assert!(row.terms.frequency > 0.0 && row.terms.ssim > 0.0);
    }
}

#[test]
fn non_finite_loss_aborts_with_components() {
    let mut t = Trainer::new(tiny("")).unwrap();
    let head = t.model.params.get_mut("head.1.bias").unwrap();
    head.data_mut()[0] = f64::NAN;
    let before = t.model.params.clone();
    match t.step() {
        Err(Error::NonFinite { iteration, components }) => {
            assert_eq!(iteration, 0);
            assert!(components.contains("spatial=NaN"), "{components}");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert_eq!(t.iter, 0);
    assert_eq!(format!("{:?}", t.model.params), format!("{before:?}"));
}

#[test]
fn checkpoints_and_best_model_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("checkpoint_every = 3");
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.run().unwrap();
    for f in ["model.pgh", "model.pgh.opt", "best.pgh"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let best = ModelState::load_for(dir.path().join("best.pgh"), &cfg.arch).unwrap();
    assert_eq!(best.arch, cfg.arch);
}

#[test]
fn evaluating_an_untrained_model_scores_the_hazy_input() {
    let cfg = tiny("");
    let t = Trainer::new(cfg).unwrap();
    let report = evaluate_set(&t.model, &t.data).unwrap();
    assert_eq!(report.rows.len(), 4);
    for (row, s) in report.rows.iter().zip(&t.data.samples) {
        assert_eq!(row.psnr_db, psnr(&s.hazy, &s.clean, 1.0).unwrap());
    }
    assert_eq!(report.mean_psnr(), t.train_psnr().unwrap());
    let csv = report.to_csv();
    assert!(csv.starts_with("image,psnr_db,ssim\nsynthetic_0000,"));
    assert_eq!(csv.lines().count(), 5);
}
