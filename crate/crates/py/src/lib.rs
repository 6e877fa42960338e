//! Python bindings: schedules, codebook search, images, the synthetic
//! dataset, the tokenizer, the generator and the nearest-centroid probe.
//!
//! Configuration structs cross the boundary as plain dicts with the same
//! keys as the TOML run configuration; missing keys take their defaults.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::de::DeserializeOwned;
use serde::Serialize;

use rdpm::data::{self, LabeledImage, SyntheticSpec};
use rdpm::generator::{self, GeneratorConfig, GeneratorTrainConfig, SamplerConfig, TrainingExample};
use rdpm::quantizer::{self, TokenizerConfig, TokenizerTrainConfig};
use rdpm::schedule::{self, CfgMode, ScheduleKind};
use rdpm::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Backward(_) | Error::NonFinite { .. } | Error::Divergence { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for rdpm::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Deserializes an optional dict through its JSON form.
fn from_dict<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Per-step mixing coefficients `alpha_t`, `beta_t` and loss weights `gamma_t`.
#[pyclass(name = "NoiseSchedule", frozen)]
struct PyNoiseSchedule(schedule::NoiseSchedule);

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (kind = "pow", steps = 10, phi = 0.75))]
    fn new(kind: &str, steps: usize, phi: f64) -> PyResult<Self> {
        let kind: ScheduleKind = kind.parse().py()?;
        Ok(Self(schedule::NoiseSchedule::new(kind, steps, phi).py()?))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.0.alphas().to_vec()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.0.betas().to_vec()
    }

    #[getter]
    fn gammas(&self) -> Vec<f64> {
        self.0.gammas().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "NoiseSchedule(kind='{}', steps={}, phi={})",
            self.0.kind(),
            self.0.steps(),
            self.0.phi()
        )
    }
}

/// Guidance strength at step `t` (1-based).
#[pyfunction]
#[pyo3(signature = (t, steps, lambda_max, mode = "linear"))]
fn cfg_lambda(t: usize, steps: usize, lambda_max: f64, mode: &str) -> PyResult<f64> {
    let mode = match mode {
        "linear" => CfgMode::Linear,
        "constant" => CfgMode::Constant,
        other => return Err(PyValueError::new_err(format!("unknown cfg mode {other:?}"))),
    };
    schedule::cfg_lambda(t, steps, lambda_max, mode).py()
}

/// `K x d` embedding table with lowest-index nearest-neighbour search.
#[pyclass(name = "Codebook", frozen)]
struct PyCodebook(quantizer::Codebook);

#[pymethods]
impl PyCodebook {
    #[new]
    fn new(size: usize, dim: usize, embeddings: Vec<f64>) -> PyResult<Self> {
        Ok(Self(quantizer::Codebook::new(size, dim, embeddings).py()?))
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.size()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn nearest(&self, query: Vec<f64>) -> PyResult<usize> {
        if query.len() != self.0.dim() {
            return Err(PyValueError::new_err(format!(
                "query has {} values, expected {}",
                query.len(),
                self.0.dim()
            )));
        }
        Ok(self.0.nearest(&query))
    }

    /// Codes for a flat sequence of `d`-vectors.
    fn nearest_codes(&self, latents: Vec<f64>) -> PyResult<Vec<usize>> {
        self.0.nearest_codes(&latents).py()
    }
}

/// RGB image with channel values in `[0, 1]`, row-major `(y, x, c)`.
#[pyclass(name = "Image", frozen)]
struct PyImage(data::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f64>) -> PyResult<Self> {
        Ok(Self(data::Image::new(width, height, pixels).py()?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(data::read_image(path).py()?))
    }

    #[staticmethod]
    fn from_ppm(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self(data::decode_ppm(bytes).py()?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::write_image(path, &self.0).py()
    }

    fn to_ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &data::encode_ppm(&self.0))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn pixels(&self) -> Vec<f64> {
        self.0.pixels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

fn labeled(images: &[PyRef<'_, PyImage>], labels: &[usize]) -> PyResult<Vec<LabeledImage>> {
    if images.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(images
        .iter()
        .zip(labels)
        .map(|(image, &label)| LabeledImage {
            image: image.0.clone(),
            label,
        })
        .collect())
}

/// Class-balanced synthetic pattern dataset as `(images, labels)`.
#[pyfunction]
#[pyo3(signature = (num_classes = 4, images_per_class = 50, size = 32, seed = 0))]
fn make_synthetic(
    num_classes: usize,
    images_per_class: usize,
    size: usize,
    seed: u64,
) -> PyResult<(Vec<PyImage>, Vec<usize>)> {
    let items = data::generate_synthetic(&SyntheticSpec {
        num_classes,
        images_per_class,
        size,
        seed,
    })
    .py()?;
    Ok(items.into_iter().map(|it| (PyImage(it.image), it.label)).unzip())
}

#[pyclass(name = "Tokenizer")]
struct PyTokenizer(quantizer::TokenizerModel);

#[pymethods]
impl PyTokenizer {
    /// `config` keys follow the `[tokenizer]` section plus a nested `schedule`.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let config: TokenizerConfig = from_dict(config)?;
        Ok(Self(quantizer::TokenizerModel::new(config, seed).py()?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(quantizer::TokenizerModel::load(path).py()?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.0.config())
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    /// Trains in place and returns the per-epoch metrics.
    #[pyo3(signature = (images, labels, config = None, seed = 0))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        images: Vec<PyRef<'py, PyImage>>,
        labels: Vec<usize>,
        config: Option<&Bound<'py, PyDict>>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TokenizerTrainConfig = from_dict(config)?;
        let items = labeled(&images, &labels)?;
        let history = quantizer::train_tokenizer(&mut self.0, &items, &cfg, seed, |_, _| Ok(())).py()?;
        to_py(py, &history)
    }

    /// Per-step code grids (`T` lists of `h * w` codes).
    fn tokenize(&self, image: PyRef<'_, PyImage>, noise_seed: u64) -> PyResult<Vec<Vec<usize>>> {
        Ok(self.0.tokenize_seeded(&image.0, noise_seed).py()?.codes)
    }

    fn reconstruct(&self, image: PyRef<'_, PyImage>, noise_seed: u64) -> PyResult<PyImage> {
        Ok(PyImage(self.0.reconstruct(&image.0, noise_seed).py()?))
    }
}

#[pyclass(name = "Generator")]
struct PyGenerator(generator::GeneratorModel);

fn examples(tok: &quantizer::TokenizerModel, items: &[LabeledImage], seed: u64) -> rdpm::Result<Vec<TrainingExample>> {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let rec = tok.tokenize_seeded(&it.image, rdpm::numerics::derive_seed(seed, i as u64))?;
            TrainingExample::from_record(&rec, it.label)
        })
        .collect()
}

#[pymethods]
impl PyGenerator {
    /// Untrained generator sized for `tokenizer`.
    #[new]
    #[pyo3(signature = (tokenizer, num_classes, depth = 6, seed = 0))]
    fn new(tokenizer: PyRef<'_, PyTokenizer>, num_classes: usize, depth: usize, seed: u64) -> PyResult<Self> {
        let config = GeneratorConfig::for_tokenizer(&tokenizer.0, depth, num_classes);
        Ok(Self(generator::GeneratorModel::new(config, seed).py()?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(generator::GeneratorModel::load(path).py()?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.0.config())
    }

    /// Tokenizes `images` with noise drawn from `seed`, trains a fresh
    /// generator of this one's configuration and replaces the weights with
    /// the EMA average. Returns `(per-epoch metrics, per-step accuracy)`.
    #[pyo3(signature = (tokenizer, images, labels, config = None, seed = 0))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        tokenizer: PyRef<'py, PyTokenizer>,
        images: Vec<PyRef<'py, PyImage>>,
        labels: Vec<usize>,
        config: Option<&Bound<'py, PyDict>>,
        seed: u64,
    ) -> PyResult<(Bound<'py, PyAny>, Vec<f64>)> {
        let cfg: GeneratorTrainConfig = from_dict(config)?;
        let items = labeled(&images, &labels)?;
        let exs = examples(&tokenizer.0, &items, seed).py()?;
        let trained = generator::train_generator(self.0.config().clone(), &exs, &cfg, seed, |_| Ok(())).py()?;
        let accuracy = generator::step_accuracy(&trained.ema, &exs).py()?;
        self.0 = trained.ema;
        Ok((to_py(py, &trained.history)?, accuracy))
    }

    /// Class-conditional samples; `sampler` keys follow `SamplerConfig`.
    #[pyo3(signature = (tokenizer, labels, sampler = None))]
    fn sample(
        &self,
        tokenizer: PyRef<'_, PyTokenizer>,
        labels: Vec<usize>,
        sampler: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Vec<PyImage>> {
        let mut cfg: SamplerConfig = from_dict(sampler)?;
        if sampler.is_none_or(|d| !d.contains("steps").unwrap_or(false)) {
            cfg.steps = tokenizer.0.steps();
        }
        let images = generator::generate(&self.0, &tokenizer.0, &labels, &cfg).py()?;
        Ok(images.into_iter().map(PyImage).collect())
    }
}

#[pyclass(name = "NearestCentroid", frozen)]
struct PyNearestCentroid(data::NearestCentroid);

#[pymethods]
impl PyNearestCentroid {
    #[new]
    fn new(images: Vec<PyRef<'_, PyImage>>, labels: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        Ok(Self(
            data::NearestCentroid::fit(&labeled(&images, &labels)?, num_classes).py()?,
        ))
    }

    fn predict(&self, image: PyRef<'_, PyImage>) -> usize {
        self.0.predict(&image.0)
    }

    fn accuracy(&self, images: Vec<PyRef<'_, PyImage>>, labels: Vec<usize>) -> PyResult<f64> {
        Ok(self.0.accuracy(&labeled(&images, &labels)?))
    }
}

#[pymodule(name = "rdpm")]
fn rdpm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyNearestCentroid>()?;
    m.add_function(wrap_pyfunction!(cfg_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    Ok(())
}
