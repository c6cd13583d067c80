//! Python bindings: synthetic data, training, checkpoints and retrieval metrics.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use shipreid::data::{generate_synthetic, write_dataset, Modality, SynthConfig};
use shipreid::eval::{self, Protocol};
use shipreid::tensor::Tensor;
use shipreid::trainer::{self, TrainConfig, TrainData};
use shipreid::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn train_config(toml: Option<&str>) -> PyResult<TrainConfig> {
    match toml {
        Some(text) => TrainConfig::from_toml(text).map_err(to_py),
        None => Ok(TrainConfig::default()),
    }
}

fn parse_protocols(names: Option<Vec<String>>) -> PyResult<Vec<Protocol>> {
    match names {
        None => Ok(Protocol::ALL.to_vec()),
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Protocol>().map_err(to_py))
            .collect(),
    }
}

fn parse_modality(code: u8) -> PyResult<Modality> {
    Modality::try_from(code).map_err(PyValueError::new_err)
}

/// Default training configuration as TOML.
#[pyfunction]
fn default_train_config() -> String {
    TrainConfig::default().to_toml()
}

/// Writes the synthetic dataset to `out_dir` and returns the image count.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=None))]
fn synthesize(out_dir: PathBuf, seed: Option<u64>) -> PyResult<usize> {
    let mut cfg = SynthConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = generate_synthetic(&cfg).map_err(to_py)?;
    write_dataset(&out_dir, &data).map_err(to_py)?;
    Ok(data.images.len())
}

/// Learning rate at the start of `epoch`.
#[pyfunction]
#[pyo3(signature = (epoch, config=None))]
fn lr_schedule(epoch: usize, config: Option<&str>) -> PyResult<f64> {
    Ok(trainer::lr_schedule(epoch, &train_config(config)?))
}

/// AP of one ranked list; `None` when there is nothing to find.
#[pyfunction]
fn average_precision(relevance: Vec<bool>, num_relevant: usize) -> Option<f64> {
    eval::average_precision(&relevance, num_relevant)
}

/// Fraction of queries whose first hit lies within each cutoff.
#[pyfunction]
fn cmc(first_hit_ranks: Vec<usize>, ks: Vec<usize>) -> Vec<f64> {
    eval::cmc(&first_hit_ranks, &ks)
}

/// Trained weights plus the configuration needed to rebuild the model.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: trainer::Checkpoint,
}

impl PyCheckpoint {
    fn data(&self, dir: &Path) -> PyResult<TrainData> {
        let m = &self.inner.config.model;
        TrainData::load(dir, m.image_h, m.image_w).map_err(to_py)
    }
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    /// Writes the checkpoint and returns the files created.
    fn save(&self, path: PathBuf) -> PyResult<Vec<PathBuf>> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_toml()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Fused features for channel-major images of the model's input size,
    /// each flattened to `channels * height * width` values. `modality`
    /// holds 0 (optical) or 1 (SAR) per image.
    fn embed(&self, images: Vec<Vec<f32>>, modality: Vec<u8>) -> PyResult<Vec<Vec<f32>>> {
        let model = self.inner.model().map_err(to_py)?;
        let (c, h, w) = (model.config.in_channels, model.config.image_h, model.config.image_w);
        if images.len() != modality.len() {
            return Err(PyValueError::new_err(format!(
                "{} images but {} modality codes",
                images.len(),
                modality.len()
            )));
        }
        if let Some(bad) = images.iter().position(|im| im.len() != c * h * w) {
            return Err(PyValueError::new_err(format!("image {bad} does not hold {c}x{h}x{w} values")));
        }
        let mods = modality.into_iter().map(parse_modality).collect::<PyResult<Vec<_>>>()?;
        let b = images.len();
        let flat: Vec<f32> = images.into_iter().flatten().collect();
        let batch = Tensor::new(&[b, c, h, w], flat).map_err(to_py)?;
        let feats = model.embed(&batch, &mods).map_err(to_py)?;
        let d = feats.shape()[1];
        Ok(feats.data().chunks(d).map(<[f32]>::to_vec).collect())
    }

    /// Retrieval metrics on the test split of a dataset directory, keyed by
    /// protocol name.
    #[pyo3(signature = (data_dir, protocols=None))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, protocols: Option<Vec<String>>) -> PyResult<Bound<'py, PyDict>> {
        let protocols = parse_protocols(protocols)?;
        let data = self.data(&data_dir)?;
        let model = self.inner.model().map_err(to_py)?;
        let reports = trainer::evaluate(&model, &data, &protocols).map_err(to_py)?;
        let out = PyDict::new(py);
        for r in reports {
            let row = PyDict::new(py);
            row.set_item("mAP", r.map)?;
            row.set_item("rank1", r.rank1)?;
            row.set_item("rank5", r.rank5)?;
            row.set_item("rank10", r.rank10)?;
            row.set_item("num_query", r.num_query)?;
            row.set_item("num_gallery", r.num_gallery)?;
            out.set_item(r.protocol.to_string(), row)?;
        }
        Ok(out)
    }
}

/// Trains from scratch on `data_dir`. Returns the final checkpoint and the
/// mean loss of every epoch.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir=None, config=None, epochs=None, seed=None))]
fn train(
    data_dir: PathBuf,
    out_dir: Option<PathBuf>,
    config: Option<&str>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(PyCheckpoint, Vec<f64>)> {
    let mut cfg = train_config(config)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e.saturating_sub(1));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = TrainData::load(&data_dir, cfg.model.image_h, cfg.model.image_w).map_err(to_py)?;
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| to_py(Error::io(dir, e)))?;
    }
    let outcome = trainer::run_training(&cfg, &data, out_dir.as_deref()).map_err(to_py)?;
    Ok((PyCheckpoint { inner: outcome.checkpoint }, outcome.epoch_loss))
}

#[pymodule]
fn shipreid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(cmc, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
