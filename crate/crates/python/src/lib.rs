//! Python bindings: dataset generation, model init/load/save, embedding,
//! training and the evaluation metrics.

use std::path::PathBuf;

use minugraph::data::{gen_dataset, DatasetSpec, Record};
use minugraph::diagnostics::gradient_suite;
use minugraph::evaluation::{self, ScoreSet};
use minugraph::graph::Minutia;
use minugraph::io::{load_checkpoint, save_checkpoint, Checkpoint, RunConfig};
use minugraph::model::{self, Embedding, Level, ModelConfig, ParameterSet};
use minugraph::numeric::{Matrix, Mode};
use minugraph::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Points = Vec<(f64, f64, f64)>;

fn minutiae(points: &[(f64, f64, f64)]) -> PyResult<Vec<Minutia>> {
    points
        .iter()
        .map(|&(x, y, d)| Minutia::new(x, y, d).map_err(err))
        .collect()
}

fn fingerprint_embedding(values: Vec<f64>) -> Embedding {
    Embedding {
        values,
        level: Level::Fingerprint,
    }
}

/// A synthetic dataset as `(identity_id, impression_id, [(x, y, d), ...])`
/// tuples. `spec_json` overrides fields of the default spec.
#[pyfunction]
#[pyo3(signature = (identities, impressions, seed=0, spec_json=None))]
fn generate_dataset(
    identities: usize,
    impressions: usize,
    seed: u64,
    spec_json: Option<&str>,
) -> PyResult<Vec<(u64, u64, Points)>> {
    let mut spec: DatasetSpec = match spec_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => DatasetSpec::default(),
    };
    spec.identities = identities;
    spec.impressions = impressions;
    spec.seed = seed;
    let records = gen_dataset(&spec).map_err(err)?;
    Ok(records
        .into_iter()
        .map(|r| {
            let pts = r.minutiae.iter().map(|m| (m.x, m.y, m.d)).collect();
            (r.identity_id, r.impression_id, pts)
        })
        .collect())
}

/// Model parameters plus the run configuration they were built with.
#[pyclass(name = "Model", module = "minugraph")]
struct PyModel {
    config: RunConfig,
    params: ParameterSet,
}

#[pymethods]
impl PyModel {
    /// Random initialization. `config_json` is a full run config; the model
    /// defaults apply when omitted.
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: RunConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
            None => RunConfig::default(),
        };
        config.validate().map_err(err)?;
        let params = ParameterSet::init(&config.model, seed).map_err(err)?;
        Ok(PyModel { config, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(err)?;
        let params = ck.params().map_err(err)?;
        Ok(PyModel {
            config: ck.config,
            params,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::from_params(&self.config, &self.params)).map_err(err)
    }

    /// The run configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.config).map_err(json_err)
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.params.config.embed_dim
    }

    /// Unit-norm fingerprint embeddings for a batch of at least two
    /// fingerprints, in input order.
    #[pyo3(signature = (fingerprints, train_mode=false))]
    fn embed_batch(&self, fingerprints: Vec<Points>, train_mode: bool) -> PyResult<Vec<Vec<f64>>> {
        let fps = fingerprints.iter().map(|f| minutiae(f)).collect::<PyResult<Vec<_>>>()?;
        let mode = if train_mode { Mode::Train } else { Mode::Infer };
        let out = model::embed_batch(&fps, &self.params, mode).map_err(err)?;
        Ok(out.into_iter().map(|e| e.values).collect())
    }

    /// Minutia-level (pre-CAM) embedding of one fingerprint.
    fn minutia_embedding(&self, fingerprint: Points) -> PyResult<Vec<f64>> {
        let e = model::trm_forward(&minutiae(&fingerprint)?, &self.params, Mode::Infer).map_err(err)?;
        Ok(e.values)
    }

    /// Fingerprint embedding of one query with stored minutia-level
    /// gallery embeddings as its context.
    fn embed_with_gallery(&self, query: Points, gallery: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let rows: Vec<&[f64]> = gallery.iter().map(Vec::as_slice).collect();
        let g = Matrix::from_rows(&rows).map_err(err)?;
        let e = model::embed_with_gallery(&minutiae(&query)?, &g, &self.params).map_err(err)?;
        Ok(e.values)
    }

    fn __repr__(&self) -> String {
        let c: &ModelConfig = &self.params.config;
        format!(
            "Model(width={}, embed_dim={}, trm_layers={}, cam_layers={})",
            c.width, c.embed_dim, c.trm_layers, c.cam_layers
        )
    }
}

/// Trains on `(identity_id, impression_id, minutiae)` records with the run
/// config as JSON; returns the trained model and the per-epoch mean losses.
#[pyfunction]
fn train(records: Vec<(u64, u64, Points)>, config_json: &str) -> PyResult<(PyModel, Vec<f64>)> {
    let config: RunConfig = serde_json::from_str(config_json).map_err(json_err)?;
    config.validate().map_err(err)?;
    let records = records
        .into_iter()
        .map(|(identity_id, impression_id, pts)| {
            Ok(Record {
                identity_id,
                impression_id,
                minutiae: minutiae(&pts)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let records = minugraph::cli::training_records(&records, &config);
    let state = minugraph::training::TrainState::fresh(&config.model, &config.train).map_err(err)?;
    let mut losses = Vec::new();
    let state = minugraph::training::train(&records, &config.train, state, |e, _| {
        losses.push(e.mean_loss);
        Ok(())
    })
    .map_err(err)?;
    Ok((
        PyModel {
            config,
            params: state.params,
        },
        losses,
    ))
}

#[pyfunction]
fn similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    evaluation::similarity(&fingerprint_embedding(a), &fingerprint_embedding(b)).map_err(err)
}

/// `(tar, threshold)` at the given false accept rate.
#[pyfunction]
fn tar_at_far(genuine: Vec<f64>, impostor: Vec<f64>, far: f64) -> PyResult<(f64, f64)> {
    let t = evaluation::tar_at_far(&ScoreSet { genuine, impostor }, far).map_err(err)?;
    Ok((t.tar, t.threshold))
}

#[pyfunction]
fn eer(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<f64> {
    evaluation::eer(&ScoreSet { genuine, impostor }).map_err(err)
}

/// Per-k closed-set identification rates for labeled probes and gallery.
#[pyfunction]
fn topk_accuracy(probes: Vec<(Vec<f64>, u64)>, gallery: Vec<(Vec<f64>, u64)>, ks: Vec<usize>) -> PyResult<Vec<f64>> {
    let wrap = |v: Vec<(Vec<f64>, u64)>| -> Vec<(Embedding, u64)> {
        v.into_iter().map(|(e, l)| (fingerprint_embedding(e), l)).collect()
    };
    let res = evaluation::topk_accuracy(&wrap(probes), &wrap(gallery), &ks).map_err(err)?;
    Ok(res.accuracy)
}

/// `(component, max relative error, passed)` for every gradient check.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn grad_check(seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let reports = gradient_suite(seed, None).map_err(err)?;
    Ok(reports
        .iter()
        .map(|r| (r.component.to_string(), r.report.max_relative_error, r.passed()))
        .collect())
}

#[pymodule(name = "minugraph")]
fn minugraph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(tar_at_far, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(topk_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
