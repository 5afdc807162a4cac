//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use manifold_ssl::config::RunConfig;
use manifold_ssl::data::{gen_blobs, gen_rings, gen_two_moons, Dataset, SplitSpec};
use manifold_ssl::eval::{evaluate, run_seed, Checkpoint, Metrics};
use manifold_ssl::losses as terms;
use manifold_ssl::model::Model;
use manifold_ssl::trainer::schedule_at as core_schedule_at;
use manifold_ssl::{Tape, Tensor};

type Rows = Vec<Vec<f64>>;

fn err(e: manifold_ssl::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(rows: &Rows) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("error_rate", m.error_rate)?;
    d.set_item("per_class_accuracy", m.per_class_accuracy.clone())?;
    d.set_item("confusion", m.confusion.clone())?;
    Ok(d)
}

/// Two-dimensional point set with partially visible labels.
#[pyclass(name = "Dataset", module = "manifold_ssl_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n, noise=0.1, seed=0))]
    fn two_moons(n: usize, noise: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: gen_two_moons(n, noise, seed).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (n, classes=3, spread=3.0, noise=1.0, seed=0))]
    fn blobs(n: usize, classes: usize, spread: f64, noise: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: gen_blobs(n, classes, spread, noise, seed).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (n, classes=2, radii=vec![1.0, 2.0], noise=0.1, seed=0))]
    fn rings(n: usize, classes: usize, radii: Vec<f64>, noise: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: gen_rings(n, classes, &radii, noise, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Dataset::load_csv(path).map_err(err)? })
    }

    /// Copy with only `n_labeled` labels visible.
    #[pyo3(signature = (n_labeled, stratified=true, seed=0))]
    fn split(&self, n_labeled: usize, stratified: bool, seed: u64) -> PyResult<Self> {
        let spec = SplitSpec { n_labeled, stratified, seed };
        Ok(Self { inner: self.inner.split_labeled(&spec).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn x(&self) -> Rows {
        self.inner.x.to_rows()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    /// Ground-truth labels of every row.
    #[getter]
    fn labels(&self) -> PyResult<Vec<usize>> {
        self.inner.true_labels().map_err(err)
    }

    #[getter]
    fn labeled_indices(&self) -> Vec<usize> {
        self.inner.labeled_indices()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// Run configuration addressed by `section.key` names.
#[pyclass(name = "RunConfig", module = "manifold_ssl_py")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(path).map_err(err)? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::parse_str(text).map_err(err)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key {key}")))
    }

    fn entries(&self) -> Vec<(String, String)> {
        self.inner.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn train_set(&self, seed: u64) -> PyResult<PyDataset> {
        Ok(PyDataset { inner: self.inner.train_set_for(seed).map_err(err)? })
    }

    fn test_set(&self, seed: u64) -> PyResult<PyDataset> {
        Ok(PyDataset { inner: self.inner.test_set_for(seed).map_err(err)? })
    }
}

/// Trained classifier together with the checkpoint it can be saved as.
#[pyclass(name = "Model", module = "manifold_ssl_py")]
struct PyModel {
    model: Model,
    checkpoint: Checkpoint,
}

impl PyModel {
    fn from_checkpoint(checkpoint: Checkpoint) -> PyResult<Self> {
        Ok(Self { model: checkpoint.model().map_err(err)?, checkpoint })
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::from_checkpoint(Checkpoint::load(path).map_err(err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(path).map_err(err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.model.classes()
    }

    /// Class probabilities for each row.
    #[pyo3(signature = (x, use_graph=true))]
    fn predict(&self, x: Rows, use_graph: bool) -> PyResult<Rows> {
        Ok(self.model.predict(&tensor(&x)?, use_graph).map_err(err)?.to_rows())
    }

    fn features(&self, x: Rows) -> PyResult<Rows> {
        Ok(self.model.features(&tensor(&x)?).map_err(err)?.to_rows())
    }

    /// `(values, labels)` of the current prototypes.
    fn prototypes(&self) -> PyResult<(Rows, Vec<usize>)> {
        let p = self.model.prototype_set(0).map_err(err)?;
        Ok((p.values.to_rows(), p.labels))
    }

    /// Edge matrices `[layer][head]` of the graph built for one input.
    fn adjacency(&self, input: Vec<f64>) -> PyResult<Vec<Vec<Rows>>> {
        let edges = self.model.adjacency(&input).map_err(err)?;
        Ok(edges
            .iter()
            .map(|layer| layer.iter().map(|e| e.weights.to_rows()).collect())
            .collect())
    }

    #[pyo3(signature = (dataset, use_graph=true))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, use_graph: bool) -> PyResult<Bound<'py, PyDict>> {
        metrics_dict(py, &evaluate(&self.model, &dataset.inner, use_graph).map_err(err)?)
    }
}

/// Outcome of `train`.
#[pyclass(name = "TrainedRun", module = "manifold_ssl_py")]
struct PyTrainedRun {
    #[pyo3(get)]
    seed: u64,
    #[pyo3(get)]
    error_rate: f64,
    #[pyo3(get)]
    labeled_error: f64,
    #[pyo3(get)]
    report_csv: String,
    metrics: Metrics,
    checkpoint: Checkpoint,
}

#[pymethods]
impl PyTrainedRun {
    /// Held-out metrics.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        metrics_dict(py, &self.metrics)
    }

    fn model(&self) -> PyResult<PyModel> {
        PyModel::from_checkpoint(self.checkpoint.clone())
    }
}

/// Train one seed of `config` and evaluate on its held-out set.
#[pyfunction]
#[pyo3(signature = (config, seed=0))]
fn train(py: Python<'_>, config: &PyRunConfig, seed: u64) -> PyResult<PyTrainedRun> {
    let cfg = config.inner.clone();
    let r = py.detach(|| run_seed(&cfg, seed)).map_err(err)?;
    Ok(PyTrainedRun {
        seed,
        error_rate: r.test_metrics.error_rate,
        labeled_error: r.report.labeled_error,
        report_csv: r.report.to_csv(),
        checkpoint: Checkpoint::new(&cfg, &r.model, &r.optimizer, seed),
        metrics: r.test_metrics,
    })
}

/// `(learning_rate, momentum)` at iteration `iteration`.
#[pyfunction]
fn schedule_at(config: &PyRunConfig, iteration: usize) -> PyResult<(f64, f64)> {
    let setup = config.inner.setup(2, 2);
    core_schedule_at(&setup.train, iteration).map_err(err)
}

fn scalar(f: impl FnOnce(&mut Tape) -> manifold_ssl::Result<manifold_ssl::Var>) -> PyResult<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape).map_err(err)?;
    Ok(tape.value(v).get(0, 0))
}

/// Mean negative log-probability of `labels`.
#[pyfunction]
fn cross_entropy(probs: Rows, labels: Vec<usize>) -> PyResult<f64> {
    let p = tensor(&probs)?;
    scalar(|t| {
        let v = t.constant(p);
        terms::cross_entropy(t, v, &labels)
    })
}

/// Mean row entropy.
#[pyfunction]
fn entropy(probs: Rows) -> PyResult<f64> {
    let p = tensor(&probs)?;
    scalar(|t| {
        let v = t.constant(p);
        terms::entropy_min(t, v)
    })
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> f64 {
    terms::kl_rows(&p, &q)
}

/// Prototype spread penalty over rows of `prototypes` grouped by `labels`.
#[pyfunction]
fn divergence(prototypes: Rows, labels: Vec<usize>, length_scale: f64, margin: f64) -> PyResult<f64> {
    let p = tensor(&prototypes)?;
    scalar(|t| {
        let v = t.constant(p);
        terms::divergence(t, v, &labels, length_scale, margin)
    })
}

/// Penalty on class centers whose length falls outside `length_scale * (1 ± margin)`.
#[pyfunction]
fn anchor_magnitude(centers: Rows, length_scale: f64, margin: f64) -> PyResult<f64> {
    let c = tensor(&centers)?;
    scalar(|t| {
        let v = t.constant(c);
        terms::anchor_magnitude(t, v, length_scale, margin)
    })
}

/// Index of the most cosine-similar center for each feature row.
#[pyfunction]
fn pseudo_label(features: Rows, centers: Rows) -> PyResult<Vec<usize>> {
    terms::pseudo_label(&tensor(&features)?, &tensor(&centers)?).map_err(err)
}

#[pymodule]
fn manifold_ssl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainedRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_at, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(divergence, m)?)?;
    m.add_function(wrap_pyfunction!(anchor_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_label, m)?)?;
    Ok(())
}
