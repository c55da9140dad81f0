//! Python bindings: metric helpers and a train / evaluate pipeline.

use std::path::PathBuf;

use gtrans::config::{self, ConfigSources};
use gtrans::{metrics, runner, scoring, ErrorKind};
use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: gtrans::Error) -> PyErr {
    match e.kind() {
        ErrorKind::Config | ErrorKind::Data => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn grid<T: Copy + Default>(rows: &[Vec<T>]) -> PyResult<Array2<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged 2-D list"));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| rows[y][x]))
}

fn sources(config: &str, overrides: Vec<String>) -> ConfigSources {
    ConfigSources { base: Some(config.to_string()), overrides, ..ConfigSources::default() }.with_env()
}

/// Image-level AUROC of `scores` against boolean `labels`.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(py_err)
}

/// Area under the per-region overlap curve up to `fpr_cap`, normalized.
#[pyfunction]
#[pyo3(signature = (maps, masks, fpr_cap = metrics::DEFAULT_FPR_CAP))]
fn aupro(maps: Vec<Vec<Vec<f32>>>, masks: Vec<Vec<Vec<u8>>>, fpr_cap: f64) -> PyResult<f64> {
    let maps = maps.iter().map(|m| grid(m)).collect::<PyResult<Vec<_>>>()?;
    let masks = masks.iter().map(|m| grid(m)).collect::<PyResult<Vec<_>>>()?;
    let mv: Vec<_> = maps.iter().map(|m| m.view()).collect();
    let kv: Vec<_> = masks.iter().map(|m| m.view()).collect();
    metrics::aupro(&mv, &kv, fpr_cap).map_err(py_err)
}

/// Layer weight from the two dissimilarities and λ.
#[pyfunction]
fn layer_weight(alpha_mse: f64, alpha_cos: f64, lam: f64) -> PyResult<f64> {
    scoring::layer_weight(alpha_mse, alpha_cos, lam).map_err(py_err)
}

/// Resolved run configuration as TOML.
#[pyfunction]
#[pyo3(signature = (config = "default", overrides = Vec::new()))]
fn resolve_config(config: &str, overrides: Vec<String>) -> PyResult<String> {
    config::resolve(&sources(config, overrides)).and_then(|c| c.to_toml()).map_err(py_err)
}

/// A trained checkpoint on disk.
#[pyclass]
struct Pipeline {
    checkpoint: PathBuf,
    overrides: Vec<String>,
}

impl Pipeline {
    fn checkpoint_sources(&self) -> ConfigSources {
        ConfigSources { base: None, overrides: self.overrides.clone(), ..ConfigSources::default() }.with_env()
    }
}

#[pymethods]
impl Pipeline {
    /// Train one category and return a pipeline for its checkpoint.
    #[staticmethod]
    #[pyo3(signature = (out, config = "toy", overrides = Vec::new()))]
    fn train(py: Python<'_>, out: PathBuf, config: &str, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = config::resolve(&sources(config, overrides)).map_err(py_err)?;
        let artifacts = py.allow_threads(|| runner::cmd_train(&cfg, &out)).map_err(py_err)?;
        Ok(Self { checkpoint: artifacts.checkpoint, overrides: Vec::new() })
    }

    /// Wrap an existing checkpoint; `overrides` apply to scoring and data keys.
    #[new]
    #[pyo3(signature = (checkpoint, overrides = Vec::new()))]
    fn new(checkpoint: PathBuf, overrides: Vec<String>) -> Self {
        Self { checkpoint, overrides }
    }

    #[getter]
    fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone()
    }

    /// Recompute λ on the validation normals; returns one value per layer.
    fn calibrate_lambda(&self, py: Python<'_>) -> PyResult<Vec<f64>> {
        let s = self.checkpoint_sources();
        let c = py.allow_threads(|| runner::cmd_calibrate_lambda(&self.checkpoint, &s)).map_err(py_err)?;
        Ok(c.lambdas)
    }

    /// Score the test split, write reports into `out`, and return the metrics.
    #[pyo3(signature = (out, emit_maps = false))]
    fn evaluate<'py>(&self, py: Python<'py>, out: PathBuf, emit_maps: bool) -> PyResult<Bound<'py, PyDict>> {
        let s = self.checkpoint_sources();
        let a = py.allow_threads(|| runner::cmd_evaluate(&self.checkpoint, &s, &out, emit_maps)).map_err(py_err)?;
        let r = &a.report.categories[0];
        let d = PyDict::new(py);
        d.set_item("category", &r.category)?;
        d.set_item("image_auroc", r.image_auroc)?;
        d.set_item("pixel_auroc", r.pixel_auroc)?;
        d.set_item("aupro", r.aupro)?;
        d.set_item("n_images", r.n_images)?;
        d.set_item("n_anomalous", r.n_anomalous)?;
        d.set_item("report", a.json)?;
        Ok(d)
    }
}

#[pymodule]
fn gtrans_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(aupro, m)?)?;
    m.add_function(wrap_pyfunction!(layer_weight, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
