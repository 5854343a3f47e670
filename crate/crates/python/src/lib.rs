//! Python bindings: `import mtdl`.

use std::path::PathBuf;

use mtdl_core::autodiff::softmax;
use mtdl_core::checkpoint::{Checkpoint, CheckpointError};
use mtdl_core::data::{self, FeatureSequence, SyntheticSpec};
use mtdl_core::model::{self as core_model, Model, ModelConfig, SequenceModel};
use mtdl_core::train::{LrSchedule, OptimState, ScheduleUnit, TrainConfig, Trainer};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn checkpoint_err(e: CheckpointError) -> PyErr {
    match e {
        CheckpointError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn sequences(seqs: &[PyRef<'_, PySequence>]) -> Vec<FeatureSequence> {
    seqs.iter().map(|s| s.inner.clone()).collect()
}

/// Builds a model config from the keyword arguments of `Model(...)`.
#[allow(clippy::too_many_arguments)]
pub fn model_config(
    input_dim: usize,
    hidden: usize,
    memory_dim: usize,
    controller_width: usize,
    classes: usize,
    thr: f64,
    history: &str,
    fallback: &str,
) -> Result<ModelConfig, String> {
    let config = ModelConfig {
        input_dim,
        hidden,
        memory_dim,
        controller_width,
        classes,
        thr,
        history: history.parse().map_err(|e| format!("history: {e}"))?,
        fallback: fallback.parse().map_err(|e| format!("fallback: {e}"))?,
    };
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

/// A feature sequence of `T` frames by `d` features with a class label.
#[pyclass(name = "Sequence", module = "mtdl")]
pub struct PySequence {
    inner: FeatureSequence,
}

#[pymethods]
impl PySequence {
    #[new]
    #[pyo3(signature = (features, label, id = "seq".to_string(), mask = None))]
    fn new(
        features: Vec<Vec<f64>>,
        label: usize,
        id: String,
        mask: Option<Vec<bool>>,
    ) -> PyResult<Self> {
        let frames = features.len();
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != dim) {
            return Err(PyValueError::new_err(
                "all frames must have the same length",
            ));
        }
        let flat = features.into_iter().flatten().collect();
        let mut inner = FeatureSequence::new(id, frames, dim, flat, label).map_err(value_err)?;
        if let Some(mask) = mask {
            inner.set_mask(mask).map_err(value_err)?;
        }
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn mask(&self) -> Option<Vec<bool>> {
        self.inner.mask.clone()
    }

    /// Frames as a list of lists.
    fn features(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len())
            .map(|t| self.inner.frame(t).to_vec())
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sequence(id={:?}, frames={}, dim={}, label={})",
            self.inner.id,
            self.inner.len(),
            self.inner.dim(),
            self.inner.label
        )
    }
}

/// The memory-augmented classifier, plus optimizer state once trained.
#[pyclass(name = "Model", module = "mtdl")]
pub struct PyModel {
    model: Model,
    opt: Option<OptimState>,
    epochs_done: u64,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        input_dim = 32, hidden = 128, memory_dim = 256, controller_width = 64, classes = 5,
        thr = 0.5, history = "mean", fallback = "force-last", seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        input_dim: usize,
        hidden: usize,
        memory_dim: usize,
        controller_width: usize,
        classes: usize,
        thr: f64,
        history: &str,
        fallback: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let config = model_config(
            input_dim,
            hidden,
            memory_dim,
            controller_width,
            classes,
            thr,
            history,
            fallback,
        )
        .map_err(PyValueError::new_err)?;
        Ok(Self {
            model: Model::new(config, seed).map_err(value_err)?,
            opt: None,
            epochs_done: 0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(checkpoint_err)?;
        Ok(Self {
            model: ck.model().map_err(checkpoint_err)?,
            opt: Some(ck.optim),
            epochs_done: ck.epochs_done,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let opt = self
            .opt
            .clone()
            .unwrap_or_else(|| OptimState::new(&self.model.params(), 0.9, 0.0));
        Checkpoint::new(&self.model, &opt, self.epochs_done)
            .save(&path)
            .map_err(checkpoint_err)
    }

    #[getter]
    fn epochs_done(&self) -> u64 {
        self.epochs_done
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = &self.model.config;
        let d = PyDict::new(py);
        d.set_item("input_dim", c.input_dim)?;
        d.set_item("hidden", c.hidden)?;
        d.set_item("memory_dim", c.memory_dim)?;
        d.set_item("controller_width", c.controller_width)?;
        d.set_item("classes", c.classes)?;
        d.set_item("thr", c.thr)?;
        d.set_item("history", c.history.to_string())?;
        d.set_item("fallback", c.fallback.to_string())?;
        Ok(d)
    }

    /// Class probabilities for one sequence.
    fn probabilities(&self, seq: PyRef<'_, PySequence>) -> PyResult<Vec<f64>> {
        let inf = self.model.infer(&seq.inner).map_err(value_err)?;
        Ok(softmax(&inf.logits))
    }

    fn predict(&self, seq: PyRef<'_, PySequence>) -> PyResult<usize> {
        Ok(self.model.infer(&seq.inner).map_err(value_err)?.predicted)
    }

    /// Per-frame `(t, a_t, s_t)` with 1-based `t`.
    fn trace(&self, seq: PyRef<'_, PySequence>) -> PyResult<Vec<(usize, f64, bool)>> {
        let trace = self.model.trace(&seq.inner).map_err(value_err)?;
        Ok(trace.frames.iter().map(|f| (f.t, f.a, f.s)).collect())
    }

    /// Trains in place and returns one dict of metrics per epoch.
    #[pyo3(signature = (
        train, epochs = 50, lr = 1e-3, momentum = 0.9, clip = 20.0, batch_size = 64,
        decay_interval = 20, decay_factor = 0.1, seed = 0, threads = 1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train: Vec<PyRef<'py, PySequence>>,
        epochs: u64,
        lr: f64,
        momentum: f64,
        clip: f64,
        batch_size: usize,
        decay_interval: u64,
        decay_factor: f64,
        seed: u64,
        threads: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let data = sequences(&train);
        let config = TrainConfig {
            epochs,
            batch_size,
            momentum,
            clip,
            schedule: LrSchedule::Step {
                base: lr,
                interval: decay_interval,
                factor: decay_factor,
                unit: ScheduleUnit::Epoch,
            },
            seed,
            threads,
        };
        let mut trainer = match self.opt.take() {
            Some(opt) => Trainer::resume(config, opt, self.epochs_done),
            None => Trainer::new(&self.model, config),
        }
        .map_err(value_err)?;
        let model = &mut self.model;
        let result = py.detach(|| {
            (0..epochs)
                .map(|_| trainer.train_epoch(model, &data))
                .collect::<Result<Vec<_>, _>>()
        });
        self.epochs_done = trainer.epochs_done;
        self.opt = Some(trainer.opt);
        let metrics = result.map_err(value_err)?;
        metrics
            .into_iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("epoch", m.epoch)?;
                d.set_item("loss", m.loss)?;
                d.set_item("accuracy", m.accuracy)?;
                d.set_item("write_rate", m.write_rate)?;
                d.set_item("lr", m.lr)?;
                Ok(d)
            })
            .collect()
    }

    /// `{"accuracy", "write_rate"}` on the given sequences.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        seqs: Vec<PyRef<'py, PySequence>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let data = sequences(&seqs);
        let model = &self.model;
        let m = py
            .detach(|| mtdl_core::train::evaluate(model, &data, None))
            .map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", m.accuracy)?;
        d.set_item("write_rate", m.write_rate)?;
        Ok(d)
    }
}

/// Synthetic planted-segment dataset; returns `(train, test)`.
#[pyfunction]
#[pyo3(signature = (
    classes = 5, dim = 32, length = 40, segment = 8, noise = 0.5, distractor = 0.3,
    signal = 1.5, train = 2000, test = 500, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn generate(
    classes: usize,
    dim: usize,
    length: usize,
    segment: usize,
    noise: f64,
    distractor: f64,
    signal: f64,
    train: usize,
    test: usize,
    seed: u64,
) -> PyResult<(Vec<PySequence>, Vec<PySequence>)> {
    let spec = SyntheticSpec {
        classes,
        dim,
        length,
        segment,
        noise,
        distractor,
        signal,
        train,
        test,
        seed,
    };
    let out = data::gen_synthetic(&spec).map_err(value_err)?;
    let wrap = |v: Vec<FeatureSequence>| v.into_iter().map(|inner| PySequence { inner }).collect();
    Ok((wrap(out.train), wrap(out.test)))
}

#[pyfunction]
fn read_feature_file(path: PathBuf) -> PyResult<PySequence> {
    let inner = data::read_feature_file(&path).map_err(|e| match e {
        data::DataError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => value_err(other),
    })?;
    Ok(PySequence { inner })
}

#[pyfunction]
fn write_feature_file(path: PathBuf, seq: PyRef<'_, PySequence>) -> PyResult<()> {
    data::write_feature_file(&path, &seq.inner).map_err(|e| PyOSError::new_err(e.to_string()))
}

/// Averages per-class probability vectors from two or more streams and
/// returns `(fused, predicted_class)`.
#[pyfunction]
fn fuse(streams: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, usize)> {
    let fused = core_model::fuse_scores(&streams).map_err(value_err)?;
    let class = core_model::predict(&fused);
    Ok((fused, class))
}

#[pymodule]
fn mtdl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(read_feature_file, m)?)?;
    m.add_function(wrap_pyfunction!(write_feature_file, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    Ok(())
}
