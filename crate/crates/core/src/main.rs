use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pgh2net::data::{load_ppm, save_ppm, HazeRanges, ImageSample};
use pgh2net::error::Result;
use pgh2net::priors::{bright_channel, dark_channel, equalize};
use pgh2net::train::{evaluate_manifest, TrainConfig, Trainer};
use pgh2net::{ModelState, PriorWindow, Shape, Tensor};

#[derive(Parser)]
#[command(name = "pgh2net", version, about = "Prior-guided hierarchical harmonization dehazing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic pairs as described by a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dehaze one PPM image.
    Dehaze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a model on the `clean hazy` pairs of a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write dark channel, bright channel and histogram-equalized maps.
    Priors {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 256)]
        levels: usize,
    },
    /// Generate synthetic clean/hazy pairs and a manifest.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn train(config: &Path) -> Result<()> {
    let mut cfg = TrainConfig::from_file(config)?;
    let dir = cfg.checkpoint_dir.get_or_insert_with(|| PathBuf::from("checkpoints")).clone();
    let mut trainer = Trainer::new(cfg)?;
    let start = trainer.iter;
    let rows = trainer.run()?;
    if let Some(last) = rows.last() {
        println!(
            "trained iterations {start}..{} final loss {:.6} (spatial {:.6}, frequency {:.6}, ssim {:.6}, reg {:.6})",
            trainer.iter, last.terms.total, last.terms.spatial, last.terms.frequency, last.terms.ssim, last.terms.reg
        );
    }
    println!("model written to {}", dir.join("model.pgh").display());
    Ok(())
}

fn dehaze(model: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = ModelState::load(model)?;
    let hazy = load_ppm(input)?;
    save_ppm(&model.dehaze(&hazy)?, output)
}

fn eval(model: &Path, manifest: &Path, report: &Path) -> Result<()> {
    let model = ModelState::load(model)?;
    let r = evaluate_manifest(&model, manifest)?;
    fs::write(report, r.to_csv())?;
    println!("{} images, mean PSNR {:.3} dB, mean SSIM {:.4}", r.rows.len(), r.mean_psnr(), r.mean_ssim());
    Ok(())
}

fn priors(input: &Path, out_dir: &Path, window: usize, levels: usize) -> Result<()> {
    let img = load_ppm(input)?;
    let window = PriorWindow::new(window)?;
    fs::create_dir_all(out_dir)?;
    save_ppm(&dark_channel(&img, window), out_dir.join("dark.ppm"))?;
    save_ppm(&bright_channel(&img, window), out_dir.join("bright.ppm"))?;

    let s = img.shape();
    let mut equalized = Tensor::zeros(Shape::new(1, 3, s.h, s.w));
    let mut hists = Vec::with_capacity(3);
    for c in 0..3 {
        let eq = equalize(img.plane(0, c), levels)?;
        for (d, &r) in equalized.plane_mut(0, c).iter_mut().zip(&eq.remapped) {
            *d = r as f64 / (levels - 1) as f64;
        }
        hists.push(eq);
    }
    save_ppm(&equalized, out_dir.join("equalized.ppm"))?;

    let mut csv = String::from("level,input_r,input_g,input_b,equalized_r,equalized_g,equalized_b\n");
    for l in 0..levels {
        let _ = write!(csv, "{l}");
        for eq in &hists {
            let _ = write!(csv, ",{}", eq.input.probs()[l]);
        }
        for eq in &hists {
            let _ = write!(csv, ",{}", eq.output.probs()[l]);
        }
        csv.push('\n');
    }
    fs::write(out_dir.join("histograms.csv"), csv)?;
    Ok(())
}

fn synth(seed: u64, count: usize, out_dir: &Path, size: usize) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut manifest = String::new();
    for i in 0..count {
        let s = ImageSample::synthetic(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size, &HazeRanges::default())?;
        let (clean, hazy) = (format!("clean_{i:04}.ppm"), format!("hazy_{i:04}.ppm"));
        save_ppm(&s.clean, out_dir.join(&clean))?;
        save_ppm(&s.hazy, out_dir.join(&hazy))?;
        let _ = writeln!(manifest, "{clean} {hazy}");
    }
    fs::write(out_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => train(config),
        Command::Dehaze { model, input, output } => dehaze(model, input, output),
        Command::Eval { model, manifest, report } => eval(model, manifest, report),
        Command::Priors {
            input,
            out_dir,
            window,
            levels,
        } => priors(input, out_dir, *window, *levels),
        Command::Synth {
            seed,
            count,
            out_dir,
            size,
        } => synth(*seed, *count, out_dir, *size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
