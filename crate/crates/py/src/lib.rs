//! Python bindings: synthetic domains, the ViT, the distillation losses and
//! the leave-one-domain-out experiment driver.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use sdvit::analysis::{self, DatasetProbe};
use sdvit::autodiff::{Tape, Tensor};
use sdvit::cli::{compare as compare_runs, ExperimentConfig};
use sdvit::data::{self, DomainDataset, DomainSpec, Style};
use sdvit::distill::DistillConfig;
use sdvit::protocol::{self, RunReport};
use sdvit::vit::{ViTConfig, ViTModel};
use sdvit::{checkpoint, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Invariant(_) | Error::BackwardConsumed => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn style(name: &str) -> PyResult<Style> {
    Style::ALL
        .iter()
        .copied()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown style {name:?}")))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

/// One rendered domain: uint8 images, labels and foreground masks.
#[pyclass(name = "Dataset", module = "sdvit_py", eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyDataset {
    inner: DomainDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (style_name, per_class, seed = 0))]
    fn generate(style_name: &str, per_class: usize, seed: u64) -> PyResult<Self> {
        let spec = DomainSpec::standard(style(style_name)?);
        DomainDataset::generate(&spec, per_class, seed)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save(&self.inner, path).map(|_| ()).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(domain={:?}, len={}, seed={})",
            self.inner.domain,
            self.inner.len(),
            self.inner.seed
        )
    }

    #[getter]
    fn domain(&self) -> String {
        self.inner.domain.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    /// `(channels, height, width)` of every image.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        (self.inner.channels, self.inner.height, self.inner.width)
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts().to_vec()
    }

    /// Channel-major bytes of example `i`.
    fn image<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyBytes>> {
        self.check(i)?;
        Ok(PyBytes::new(py, self.inner.image(i)))
    }

    fn mask(&self, i: usize) -> PyResult<Vec<bool>> {
        self.check(i)?;
        Ok(self.inner.mask(i).to_vec())
    }
}

impl PyDataset {
    fn check(&self, i: usize) -> PyResult<()> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(format!(
                "index {i} out of range for {}",
                self.inner.len()
            )));
        }
        Ok(())
    }
}

/// A monolithic ViT whose every block can feed the shared head.
#[pyclass(name = "ViT", module = "sdvit_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyViT {
    inner: ViTModel,
}

#[pymethods]
impl PyViT {
    #[new]
    #[pyo3(signature = (
        seed = 0, image_size = 32, channels = 3, patch_size = 4, embed_dim = 64,
        num_heads = 4, num_blocks = 6, mlp_ratio = 4, num_classes = 7
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        image_size: usize,
        channels: usize,
        patch_size: usize,
        embed_dim: usize,
        num_heads: usize,
        num_blocks: usize,
        mlp_ratio: usize,
        num_classes: usize,
    ) -> PyResult<Self> {
        let config = ViTConfig {
            image_size,
            channels,
            patch_size,
            embed_dim,
            num_heads,
            num_blocks,
            mlp_ratio,
            num_classes,
        };
        ViTModel::init(config, seed)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::load(path)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(py_err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(json_err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.config().num_blocks
    }

    /// Logits of sub-model `block` (default: the full model) for the given
    /// examples.
    #[pyo3(signature = (dataset, indices, block = None))]
    fn logits(
        &self,
        dataset: &PyDataset,
        indices: Vec<usize>,
        block: Option<usize>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let batch = dataset.inner.batch(&indices).map_err(py_err)?;
        let tape = Tape::inference();
        let trace = self.inner.forward(&tape, &batch).map_err(py_err)?;
        let out = match block {
            Some(b) => trace.sub_model_logits(b).map_err(py_err)?,
            None => trace.logits,
        };
        let classes = self.inner.config().num_classes;
        Ok(out
            .value()
            .data()
            .chunks(classes)
            .map(<[f64]>::to_vec)
            .collect())
    }

    fn predict(&self, dataset: &PyDataset) -> PyResult<Vec<usize>> {
        let probe = DatasetProbe::run(&self.inner, &dataset.inner).map_err(py_err)?;
        Ok(probe.predictions.last().cloned().unwrap_or_default())
    }

    fn evaluate(&self, dataset: &PyDataset) -> PyResult<f64> {
        protocol::evaluate(&self.inner, &dataset.inner).map_err(py_err)
    }

    fn block_accuracy(&self, dataset: &PyDataset) -> PyResult<Vec<f64>> {
        analysis::block_wise_accuracy(&self.inner, &dataset.inner)
            .map(|p| p.accuracy)
            .map_err(py_err)
    }

    /// Rows are true classes, columns predictions.
    fn confusion(&self, dataset: &PyDataset) -> PyResult<Vec<Vec<u64>>> {
        analysis::confusion_matrix(&self.inner, &dataset.inner)
            .map(|m| m.counts)
            .map_err(py_err)
    }

    /// Normalized final-block class attention of example `i`, image-sized.
    fn attention_map(&self, dataset: &PyDataset, i: usize) -> PyResult<Vec<Vec<f64>>> {
        dataset.check(i)?;
        let batch = dataset.inner.batch(&[i]).map_err(py_err)?;
        let tape = Tape::inference();
        let trace = self.inner.forward(&tape, &batch).map_err(py_err)?;
        let map = trace.attention_map(0).map_err(py_err)?;
        let w = map.shape()[1];
        Ok(map.data().chunks(w).map(<[f64]>::to_vec).collect())
    }

    fn foreground_ratio(&self, dataset: &PyDataset, i: usize) -> PyResult<f64> {
        dataset.check(i)?;
        let batch = dataset.inner.batch(&[i]).map_err(py_err)?;
        let tape = Tape::inference();
        let trace = self.inner.forward(&tape, &batch).map_err(py_err)?;
        analysis::foreground_ratio(&trace, 0, dataset.inner.mask(i)).map_err(py_err)
    }

    /// Cosine similarity between mean final class tokens of the pooled
    /// sources and of the target.
    fn overlap(&self, sources: Vec<PyRef<'_, PyDataset>>, target: &PyDataset) -> PyResult<f64> {
        let refs: Vec<&DomainDataset> = sources.iter().map(|s| &s.inner).collect();
        analysis::domain_overlap(&self.inner, &refs, &target.inner)
            .map(|o| o.cosine)
            .map_err(py_err)
    }
}

/// The four standard domains from one seed.
#[pyfunction]
#[pyo3(signature = (per_class, seed = 0))]
fn generate_all(per_class: usize, seed: u64) -> PyResult<Vec<PyDataset>> {
    data::generate_all(per_class, seed)
        .map(|v| v.into_iter().map(|inner| PyDataset { inner }).collect())
        .map_err(py_err)
}

/// Batch-mean KL(teacher || student) of temperature-softened rows.
#[pyfunction]
fn kl_divergence(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let tape = Tape::inference();
    let t = tape.constant(matrix(&teacher)?);
    let s = tape.constant(matrix(&student)?);
    sdvit::autodiff::kl_teacher_student(t, s, tau)
        .and_then(|v| v.value().item())
        .map_err(py_err)
}

#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let tape = Tape::inference();
    tape.constant(matrix(&logits)?)
        .cross_entropy(&labels)
        .and_then(|v| v.value().item())
        .map_err(py_err)
}

/// Grid search with training-domain validation on every trial, returning
/// the report as JSON and the first trial's selected model. `config` is an
/// experiment config in JSON; missing fields take their defaults.
#[pyfunction]
#[pyo3(signature = (datasets, target, config = None, erm = false))]
fn run_experiment(
    py: Python<'_>,
    datasets: Vec<PyRef<'_, PyDataset>>,
    target: &str,
    config: Option<&str>,
    erm: bool,
) -> PyResult<(String, PyViT)> {
    let mut cfg: ExperimentConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => ExperimentConfig::default(),
    };
    if erm {
        cfg.train.distill = DistillConfig {
            tau: cfg.train.distill.tau,
            ..DistillConfig::erm()
        };
    }
    let domains: Vec<DomainDataset> = datasets.iter().map(|d| d.inner.clone()).collect();
    let t = domains
        .iter()
        .position(|d| d.domain == target)
        .ok_or_else(|| PyValueError::new_err(format!("no dataset named {target:?}")))?;
    let seeds = protocol::trial_seeds(cfg.seed, cfg.trials);
    let outcome = py
        .detach(|| {
            protocol::grid_search(
                &domains, t, &cfg.grid, &seeds, &cfg.model, &cfg.train, cfg.jobs,
            )
        })
        .map_err(py_err)?;
    let json = serde_json::to_string(&outcome.report).map_err(json_err)?;
    let model = outcome
        .models
        .into_iter()
        .next()
        .expect("at least one trial");
    Ok((json, PyViT { inner: model }))
}

/// Per-target comparison of two report JSON strings (baseline first).
#[pyfunction]
fn compare(baseline: &str, method: &str) -> PyResult<String> {
    let b: RunReport = serde_json::from_str(baseline).map_err(json_err)?;
    let m: RunReport = serde_json::from_str(method).map_err(json_err)?;
    let cmp = compare_runs(&[b], &[m]).map_err(py_err)?;
    serde_json::to_string(&cmp).map_err(json_err)
}

#[pymodule]
fn sdvit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyViT>()?;
    m.add_function(wrap_pyfunction!(generate_all, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add("CLASS_NAMES", data::CLASS_NAMES.to_vec())?;
    m.add(
        "STYLES",
        Style::ALL.iter().map(|s| s.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
