use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use pgh2net::data::{self, HazeRanges, ImageSample};
use pgh2net::objectives;
use pgh2net::priors;
use pgh2net::train::{TrainConfig, Trainer as CoreTrainer};
use pgh2net::{ArchConfig, ModelState, PriorWindow, Shape};

fn py_err(e: pgh2net::Error) -> PyErr {
    match e {
        pgh2net::Error::Io(_) | pgh2net::Error::Checkpoint { .. } | pgh2net::Error::Ppm { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn wrap<T>(r: pgh2net::Result<T>) -> PyResult<T> {
    r.map_err(py_err)
}

/// Dense NCHW tensor of f64.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: pgh2net::Tensor,
}

impl From<pgh2net::Tensor> for Tensor {
    fn from(inner: pgh2net::Tensor) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f64>) -> PyResult<Self> {
        let (n, c, h, w) = shape;
        Ok(wrap(pgh2net::Tensor::new(Shape::new(n, c, h, w), data))?.into())
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        let (n, c, h, w) = shape;
        pgh2net::Tensor::zeros(Shape::new(n, c, h, w)).into()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.c, s.h, s.w)
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> PyResult<f64> {
        let s = self.inner.shape();
        if n >= s.n || c >= s.c || y >= s.h || x >= s.w {
            return Err(PyValueError::new_err(format!("index ({n}, {c}, {y}, {x}) out of range for {s}")));
        }
        Ok(self.inner.at(n, c, y, x))
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn max_abs_diff(&self, other: &Tensor) -> PyResult<f64> {
        if self.inner.shape() != other.inner.shape() {
            return Err(PyValueError::new_err(format!("shape mismatch: {} vs {}", self.inner.shape(), other.inner.shape())));
        }
        Ok(self.inner.max_abs_diff(&other.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={})", self.inner.shape())
    }
}

#[pyfunction]
#[pyo3(signature = (img, window = 3))]
fn dark_channel(img: &Tensor, window: usize) -> PyResult<Tensor> {
    Ok(priors::dark_channel(&img.inner, wrap(PriorWindow::new(window))?).into())
}

#[pyfunction]
#[pyo3(signature = (img, window = 3))]
fn bright_channel(img: &Tensor, window: usize) -> PyResult<Tensor> {
    Ok(priors::bright_channel(&img.inner, wrap(PriorWindow::new(window))?).into())
}

/// Returns (remapped levels, input distribution, output distribution).
#[pyfunction]
#[pyo3(signature = (values, levels = 256))]
fn equalize(values: Vec<f64>, levels: usize) -> PyResult<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let eq = wrap(priors::equalize(&values, levels))?;
    Ok((eq.remapped, eq.input.probs().to_vec(), eq.output.probs().to_vec()))
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> PyResult<f64> {
    wrap(objectives::psnr(&a.inner, &b.inner, peak))
}

#[pyfunction]
fn ssim(a: &Tensor, b: &Tensor) -> PyResult<f64> {
    wrap(objectives::mean_ssim(&a.inner, &b.inner))
}

/// 2-D DFT of one row-major plane; returns (real, imaginary).
#[pyfunction]
fn fft2d(plane: Vec<f64>, h: usize, w: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    wrap(objectives::fft2d(&plane, h, w))
}

#[pyfunction]
fn generate_clean(seed: u64, h: usize, w: usize) -> Tensor {
    data::generate_clean(seed, h, w).into()
}

/// Synthetic (clean, hazy) pair with default haze ranges.
#[pyfunction]
fn synthesize(seed: u64, size: usize) -> PyResult<(Tensor, Tensor)> {
    let s = wrap(ImageSample::synthetic(seed, size, &HazeRanges::default()))?;
    Ok((s.clean.into(), s.hazy.into()))
}

#[pyfunction]
fn load_ppm(path: &str) -> PyResult<Tensor> {
    Ok(wrap(data::load_ppm(path))?.into())
}

#[pyfunction]
fn save_ppm(img: &Tensor, path: &str) -> PyResult<()> {
    wrap(data::save_ppm(&img.inner, path))
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct Model {
    inner: ModelState,
}

#[pymethods]
impl Model {
    /// Fresh model; `arch` is `key = value` text overriding the defaults.
    #[staticmethod]
    #[pyo3(signature = (arch = "", seed = 0))]
    fn build(arch: &str, seed: u64) -> PyResult<Self> {
        let cfg = wrap(ArchConfig::from_kv_text(arch))?;
        Ok(Self {
            inner: wrap(pgh2net::build(&cfg, seed))?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: wrap(ModelState::load(path))?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        wrap(self.inner.save(path))
    }

    /// Full, half and quarter resolution predictions.
    fn forward(&self, hazy: &Tensor) -> PyResult<Vec<Tensor>> {
        Ok(wrap(self.inner.forward(&hazy.inner))?.into_iter().map(Tensor::from).collect())
    }

    fn dehaze(&self, hazy: &Tensor) -> PyResult<Tensor> {
        Ok(wrap(self.inner.dehaze(&hazy.inner))?.into())
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.iter().map(|(_, t)| t.numel()).sum()
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch.to_kv_text()
    }
}

#[pyclass(unsendable)]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: &str) -> PyResult<Self> {
        Ok(Self {
            inner: wrap(CoreTrainer::new(wrap(TrainConfig::parse(config))?))?,
        })
    }

    /// One optimizer step; returns (total, spatial, frequency, ssim, reg).
    fn step(&mut self) -> PyResult<(f64, f64, f64, f64, f64)> {
        let t = wrap(self.inner.step())?.terms;
        Ok((t.total, t.spatial, t.frequency, t.ssim, t.reg))
    }

    /// Runs to the configured iteration count; returns the total losses.
    fn run(&mut self) -> PyResult<Vec<f64>> {
        Ok(wrap(self.inner.run())?.iter().map(|r| r.terms.total).collect())
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iter
    }

    fn train_psnr(&self) -> PyResult<f64> {
        wrap(self.inner.train_psnr())
    }

    fn save(&self, dir: &str) -> PyResult<String> {
        Ok(wrap(self.inner.save(dir))?.display().to_string())
    }

    fn model(&self) -> Model {
        Model {
            inner: self.inner.model.clone(),
        }
    }
}

#[pymodule(name = "pgh2net")]
fn pgh2net_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(dark_channel, m)?)?;
    m.add_function(wrap_pyfunction!(bright_channel, m)?)?;
    m.add_function(wrap_pyfunction!(equalize, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(fft2d, m)?)?;
    m.add_function(wrap_pyfunction!(generate_clean, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(load_ppm, m)?)?;
    m.add_function(wrap_pyfunction!(save_ppm, m)?)?;
    Ok(())
}
