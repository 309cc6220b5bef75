//! Python bindings: `import classpoison`.

use std::path::PathBuf;

use ::classpoison as core;
use core::datasets::{generate_blobs, split};
use core::harness::{self, CurvePoint};
use core::metrics::{self, Phase, PredictionSnapshot};
use core::{ASConfig, ASExperiment, AsMethod, LabeledExample, LrSchedule, OVConfig, OVExperiment, OvMethod, TensorImage};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image(pixels: Vec<f64>) -> PyResult<TensorImage> {
    TensorImage::new(pixels).map_err(err)
}

/// Multilayer perceptron with ReLU hidden layers and raw logit outputs.
#[pyclass(name = "MlpModel", module = "classpoison", skip_from_py_object)]
#[derive(Clone)]
struct PyMlp {
    inner: core::MlpModel,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (layer_dims, seed = 0))]
    fn new(layer_dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: core::MlpModel::new(&layer_dims, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::MlpModel::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(err)
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.layer_dims()
    }

    #[getter]
    fn k_classes(&self) -> usize {
        self.inner.k_classes()
    }

    fn forward(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&image(pixels)?).map_err(err)?.values().to_vec())
    }

    fn predict(&self, pixels: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&image(pixels)?).map_err(err)
    }

    fn loss(&self, pixels: Vec<f64>, label: usize) -> PyResult<f64> {
        self.inner.train_loss(&image(pixels)?, label).map_err(err)
    }

    /// Gradient of the cross-entropy loss with respect to the input.
    fn input_gradient(&self, pixels: Vec<f64>, label: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.backward(&image(pixels)?, label).map_err(err)?.input_grad)
    }

    fn __repr__(&self) -> String {
        format!("MlpModel({:?})", self.inner.layer_dims())
    }
}

/// Labeled images with a fixed class count.
#[pyclass(name = "Dataset", module = "classpoison", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: core::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(k_classes: usize, images: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Self> {
        if images.len() != labels.len() {
            return Err(PyValueError::new_err(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let examples = images
            .into_iter()
            .zip(labels)
            .map(|(px, label)| Ok(LabeledExample { image: image(px)?, label }))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: core::Dataset::new(k_classes, core::DatasetRole::Train, examples).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (k_classes, dim, n_per_class, center_separation, noise_sigma, seed = 0))]
    fn blobs(
        k_classes: usize,
        dim: usize,
        n_per_class: usize,
        center_separation: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = core::BlobSpec {
            k_classes,
            dim,
            n_per_class,
            center_separation,
            noise_sigma,
            rng_seed: seed,
        };
        Ok(Self {
            inner: generate_blobs(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load_idx(images_path: PathBuf, labels_path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::datasets::load_idx(&images_path, &labels_path).map_err(err)?,
        })
    }

    /// Stratified split into `(train, test)`.
    #[pyo3(signature = (train_fraction, seed = 0))]
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = split(&self.inner, train_fraction, seed).map_err(err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn head(&self, n: usize) -> Self {
        Self {
            inner: self.inner.head(n),
        }
    }

    #[getter]
    fn k_classes(&self) -> usize {
        self.inner.k_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .examples()
            .get(i)
            .map(|e| e.image.pixels().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Minibatch SGD; returns `(model, steps)`.
#[pyfunction]
#[pyo3(signature = (model, train, epochs, batch_size, lr, decay_factor = 1.0, decay_every = 1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    model: &PyMlp,
    train: &PyDataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    decay_factor: f64,
    decay_every: u64,
    seed: u64,
) -> PyResult<(PyMlp, u64)> {
    let cfg = core::PretrainConfig {
        epochs,
        batch_size,
        schedule: LrSchedule::new(lr, decay_factor, decay_every).map_err(err)?,
        seed,
    };
    let out = harness::pretrain(model.inner.clone(), &train.inner, &cfg, None).map_err(err)?;
    Ok((PyMlp { inner: out.model }, out.steps))
}

fn poison_dict<'py>(py: Python<'py>, p: &core::PoisonedExample) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("image", p.image.pixels().to_vec())?;
    d.set_item("label", p.assigned_label)?;
    d.set_item("original_label", p.provenance.original_label)?;
    d.set_item("iterations", p.provenance.iterations)?;
    let reason = match p.provenance.stop_reason {
        core::StopReason::ConvergedT => "converged_T",
        core::StopReason::EarlyStop => "early_stop",
    };
    d.set_item("stop_reason", reason)?;
    Ok(d)
}

/// All-Supplanter poison crafted from one seed image.
#[pyfunction]
#[pyo3(signature = (model, pixels, label, supplanter, lambda_ = 1.0, epsilon = 0.3, max_iters = 100))]
fn craft_as_poison<'py>(
    py: Python<'py>,
    model: &PyMlp,
    pixels: Vec<f64>,
    label: usize,
    supplanter: usize,
    lambda_: f64,
    epsilon: f64,
    max_iters: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let seed = LabeledExample {
        image: image(pixels)?,
        label,
    };
    let cfg = ASConfig {
        supplanter,
        lambda: lambda_,
        epsilon,
        max_iters,
    };
    let p = core::attacks::craft_as_poison(&model.inner, &seed, &cfg).map_err(err)?;
    poison_dict(py, &p)
}

fn curve_list<'py>(py: Python<'py>, curve: &[CurvePoint]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    curve
        .iter()
        .map(|p| {
            let d = PyDict::new(py);
            d.set_item("iteration", p.iteration)?;
            d.set_item("lr", p.lr)?;
            d.set_item("error", p.error)?;
            match p.cft() {
                Some(cft) => d.set_item("cft", cft.to_vec())?,
                None => d.set_item("ctt", p.ctt())?,
            }
            Ok(d)
        })
        .collect()
}

fn parse_as_method(name: &str, dgm_steps: usize) -> PyResult<AsMethod> {
    Ok(match name {
        "as" => AsMethod::AllSupplanter,
        "fl" => AsMethod::FlippedLabel,
        "dgm" => AsMethod::Dgm { steps: dgm_steps },
        "clean" => AsMethod::Clean,
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    })
}

fn parse_ov_method(name: &str, dgm_steps: usize) -> PyResult<OvMethod> {
    Ok(match name {
        "ov" => OvMethod::OnlyVictim,
        "fl" => OvMethod::FlippedLabel,
        "dgm" => OvMethod::Dgm { steps: dgm_steps },
        "clean" => OvMethod::Clean,
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    })
}

/// Runs an All-Supplanter session; returns `{"curve": [...], "ctt": .., "error": ..}`.
#[pyfunction]
#[pyo3(signature = (
    model, train, test, supplanter, lr, start_step = 0, decay_factor = 1.0, decay_every = 1,
    iterations = 50, fine_tune_steps = 5, method = "as", lr_override = None, seed = 0, dgm_steps = 10
))]
#[allow(clippy::too_many_arguments)]
fn run_as_experiment<'py>(
    py: Python<'py>,
    model: &PyMlp,
    train: &PyDataset,
    test: &PyDataset,
    supplanter: usize,
    lr: f64,
    start_step: u64,
    decay_factor: f64,
    decay_every: u64,
    iterations: usize,
    fine_tune_steps: usize,
    method: &str,
    lr_override: Option<f64>,
    seed: u64,
    dgm_steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let inputs = core::SessionInputs {
        base_model: &model.inner,
        train: &train.inner,
        test: &test.inner,
        schedule: LrSchedule::new(lr, decay_factor, decay_every).map_err(err)?,
        start_step,
        seed,
    };
    let exp = ASExperiment {
        method: parse_as_method(method, dgm_steps)?,
        attack_iterations: iterations,
        fine_tune_steps_per_poison: fine_tune_steps,
        lr_override,
        ..ASExperiment::new(ASConfig::new(supplanter))
    };
    let (session, report) = harness::run_as_experiment(&inputs, &exp).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("curve", curve_list(py, &session.curve)?)?;
    d.set_item("ctt", report.overall.ctt)?;
    d.set_item("error_before", report.overall.error_before)?;
    d.set_item("error", report.overall.error_after)?;
    d.set_item("model", PyMlp { inner: session.live_model })?;
    Ok(d)
}

/// Runs an Only-Victim session; returns `{"curve": [...], "cft": [...], "error": ..}`.
#[pyfunction]
#[pyo3(signature = (
    model, train, test, victim, poison_label, lr, start_step = 0, decay_factor = 1.0, decay_every = 1,
    epochs = 5, poison_fraction = 0.1, clean_replay = true, batch_size = 16, method = "ov", seed = 0,
    dgm_steps = 10
))]
#[allow(clippy::too_many_arguments)]
fn run_ov_experiment<'py>(
    py: Python<'py>,
    model: &PyMlp,
    train: &PyDataset,
    test: &PyDataset,
    victim: usize,
    poison_label: usize,
    lr: f64,
    start_step: u64,
    decay_factor: f64,
    decay_every: u64,
    epochs: usize,
    poison_fraction: f64,
    clean_replay: bool,
    batch_size: usize,
    method: &str,
    seed: u64,
    dgm_steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let inputs = core::SessionInputs {
        base_model: &model.inner,
        train: &train.inner,
        test: &test.inner,
        schedule: LrSchedule::new(lr, decay_factor, decay_every).map_err(err)?,
        start_step,
        seed,
    };
    let exp = OVExperiment {
        attack: OVConfig {
            poison_fraction,
            ..OVConfig::new(victim, poison_label)
        },
        method: parse_ov_method(method, dgm_steps)?,
        epochs,
        clean_replay,
        batch_size,
        lr_override: None,
    };
    let (session, report) = harness::run_ov_experiment(&inputs, &exp).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("curve", curve_list(py, &session.curve)?)?;
    d.set_item("cft", report.classes.iter().map(|c| c.cft).collect::<Vec<_>>())?;
    d.set_item("error_before", report.overall.error_before)?;
    d.set_item("error", report.overall.error_after)?;
    d.set_item("model", PyMlp { inner: session.live_model })?;
    Ok(d)
}

fn snapshots(
    k_classes: usize,
    truth: Vec<usize>,
    before: Vec<usize>,
    after: Vec<usize>,
) -> PyResult<(PredictionSnapshot, PredictionSnapshot)> {
    Ok((
        PredictionSnapshot::new(Phase::Before, k_classes, truth.clone(), before).map_err(err)?,
        PredictionSnapshot::new(Phase::After, k_classes, truth, after).map_err(err)?,
    ))
}

/// Overall change-to-target rate from raw label lists.
#[pyfunction]
fn ctt_overall(
    k_classes: usize,
    truth: Vec<usize>,
    before: Vec<usize>,
    after: Vec<usize>,
    target: usize,
) -> PyResult<Option<f64>> {
    let (b, a) = snapshots(k_classes, truth, before, after)?;
    metrics::ctt_overall(&b, &a, target).map_err(err)
}

/// Change-from-target rate of one class from raw label lists.
#[pyfunction]
fn cft_per_class(
    k_classes: usize,
    truth: Vec<usize>,
    before: Vec<usize>,
    after: Vec<usize>,
    class: usize,
) -> PyResult<Option<f64>> {
    let (b, a) = snapshots(k_classes, truth, before, after)?;
    metrics::cft_per_class(&b, &a, class).map_err(err)
}

#[pymodule]
#[pyo3(name = "classpoison")]
fn classpoison_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMlp>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(craft_as_poison, m)?)?;
    m.add_function(wrap_pyfunction!(run_as_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_ov_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(ctt_overall, m)?)?;
    m.add_function(wrap_pyfunction!(cft_per_class, m)?)?;
    Ok(())
}
