//! Python bindings: memory bank, retrieval metrics, synthetic data, training
//! and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use tcpm::config::RunConfig;
use tcpm::dataset::Dataset as CoreDataset;
use tcpm::error::Error;
use tcpm::eval::{self, Descriptor as CoreDescriptor, Metric};
use tcpm::gradcheck::{loss_gradient_report, LossCheckSpec};
use tcpm::io::Checkpoint;
use tcpm::memory::MemoryBank as CoreBank;
use tcpm::model::Model as CoreModel;
use tcpm::synth::{synth_generate, write_dataset};
use tcpm::trainer::{load_model, model_checkpoint, train as core_train, OutputDir};
use tcpm::Tensor;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Shape { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn metric(name: &str) -> PyResult<Metric> {
    Metric::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown metric `{name}`")))
}

/// Builds a run configuration from `key=value` style settings.
fn run_config(settings: Option<BTreeMap<String, String>>) -> PyResult<RunConfig> {
    let pairs: Vec<(String, String)> = settings.unwrap_or_default().into_iter().collect();
    let mut config = RunConfig::default();
    for (k, v) in &pairs {
        config.set(k, v).map_err(to_py)?;
    }
    config.validate().map_err(to_py)?;
    Ok(config)
}

/// Per-image, per-part exemplar memory with momentum updates.
#[pyclass(module = "tcpm_py")]
struct MemoryBank {
    inner: CoreBank,
}

#[pymethods]
impl MemoryBank {
    #[new]
    #[pyo3(signature = (ids, parts, channels, delta=0.5, normalize=true))]
    fn new(ids: Vec<usize>, parts: usize, channels: usize, delta: f64, normalize: bool) -> PyResult<Self> {
        let bank = CoreBank::new(ids, parts, channels, delta).map_err(to_py)?;
        Ok(MemoryBank {
            inner: if normalize { bank } else { bank.without_normalization() },
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Writes `h` with the bank's momentum; returns the slot before
    /// normalization.
    fn write(&mut self, image: usize, part: usize, h: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.write(image, part, &h).map_err(to_py)
    }

    fn update(&mut self, image: usize, part: usize, h: Vec<f64>, delta: f64) -> PyResult<Vec<f64>> {
        self.inner.update(image, part, &h, delta).map_err(to_py)
    }

    fn slot(&self, image: usize, part: usize) -> PyResult<Vec<f64>> {
        self.check(image, part)?;
        Ok(self.inner.slot(image, part).to_vec())
    }

    fn is_initialized(&self, image: usize, part: usize) -> PyResult<bool> {
        self.check(image, part)?;
        Ok(self.inner.is_initialized(image, part))
    }

    /// Mean of the initialized slots per identity: `{identity: [part vectors]}`;
    /// parts without any initialized slot are `None`.
    fn class_centers(&self) -> BTreeMap<usize, Vec<Option<Vec<f64>>>> {
        let centers = self.inner.class_centers();
        let mut ids: Vec<usize> = self.inner.ids().to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter_map(|id| {
                let row = centers.row_of(id)?;
                let parts = (0..self.inner.parts())
                    .map(|p| centers.has_part(row, p).then(|| centers.center(row, p).to_vec()))
                    .collect();
                Some((id, parts))
            })
            .collect()
    }
}

impl MemoryBank {
    fn check(&self, image: usize, part: usize) -> PyResult<()> {
        if image >= self.inner.len() || part >= self.inner.parts() {
            return Err(PyValueError::new_err(format!("slot ({image}, {part}) out of range")));
        }
        Ok(())
    }
}

/// A retrieval descriptor.
#[pyclass(module = "tcpm_py", get_all, from_py_object)]
#[derive(Clone)]
struct Descriptor {
    sample_id: String,
    identity: String,
    camera: String,
    vector: Vec<f64>,
}

#[pymethods]
impl Descriptor {
    #[new]
    fn new(sample_id: String, identity: String, camera: String, vector: Vec<f64>) -> Self {
        Descriptor {
            sample_id,
            identity,
            camera,
            vector,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Descriptor({:?}, identity={:?}, camera={:?}, dim={})",
            self.sample_id,
            self.identity,
            self.camera,
            self.vector.len()
        )
    }
}

impl From<&Descriptor> for CoreDescriptor {
    fn from(d: &Descriptor) -> Self {
        CoreDescriptor {
            sample_id: d.sample_id.clone(),
            identity: d.identity.clone(),
            camera: d.camera.clone(),
            vector: d.vector.clone(),
        }
    }
}

impl From<CoreDescriptor> for Descriptor {
    fn from(d: CoreDescriptor) -> Self {
        Descriptor {
            sample_id: d.sample_id,
            identity: d.identity,
            camera: d.camera,
            vector: d.vector,
        }
    }
}

fn core_list(items: &[Descriptor]) -> Vec<CoreDescriptor> {
    items.iter().map(CoreDescriptor::from).collect()
}

/// Ranks `gallery` against `query`; returns `(ranked sample ids, scores,
/// average precision or None)`.
#[pyfunction]
#[pyo3(signature = (query, gallery, metric="cosine"))]
fn rank(query: &Descriptor, gallery: Vec<Descriptor>, metric: &str) -> PyResult<(Vec<String>, Vec<f64>, Option<f64>)> {
    let r = eval::rank(&query.into(), &core_list(&gallery), self::metric(metric)?).map_err(to_py)?;
    let ap = eval::average_precision(&r);
    Ok((r.ranked, r.scores, ap))
}

/// Evaluates all queries; returns the metrics summary as JSON text.
#[pyfunction]
#[pyo3(signature = (queries, gallery, metric="cosine"))]
fn evaluate(queries: Vec<Descriptor>, gallery: Vec<Descriptor>, metric: &str) -> PyResult<String> {
    let e = eval::evaluate(&core_list(&queries), &core_list(&gallery), self::metric(metric)?).map_err(to_py)?;
    Ok(e.summary.to_json())
}

/// Independent average-precision reference.
#[pyfunction]
fn brute_force_ap(query: &Descriptor, gallery: Vec<Descriptor>) -> Option<f64> {
    tcpm::oracle::brute_force_ap(&query.into(), &core_list(&gallery))
}

/// A loaded manifest with its inputs.
#[pyclass(module = "tcpm_py")]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: CoreDataset::load(&manifest).map_err(to_py)?,
        })
    }

    /// Generates a synthetic dataset in memory; `settings` use the run
    /// configuration keys (`identities`, `per_identity`, `seed`, ...).
    #[staticmethod]
    #[pyo3(signature = (settings=None))]
    fn synthetic(settings: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let config = run_config(settings)?;
        Ok(Dataset {
            inner: synth_generate(&config.synth).map_err(to_py)?.into(),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(sample_id, identity, camera, split)` per record.
    fn records(&self) -> Vec<(String, String, String, String)> {
        self.inner
            .records
            .iter()
            .map(|r| {
                (
                    r.sample_id.clone(),
                    r.identity.clone(),
                    r.camera.clone(),
                    r.split.as_str().to_string(),
                )
            })
            .collect()
    }

    fn input(&self, index: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .inner
            .inputs
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }
}

/// Writes a synthetic dataset under `out`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, settings=None))]
fn synth(out: PathBuf, settings: Option<BTreeMap<String, String>>) -> PyResult<PathBuf> {
    let config = run_config(settings)?;
    let data = synth_generate(&config.synth).map_err(to_py)?;
    write_dataset(&out, &data).map_err(to_py)
}

/// A part-feature model.
#[pyclass(module = "tcpm_py")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::read(&checkpoint).map_err(to_py)?;
        Ok(Model {
            inner: load_model(&ck).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_checkpoint(&self.inner).write(&path).map_err(to_py)
    }

    #[getter]
    fn parts(&self) -> usize {
        self.inner.config().parts()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Part features of one input given as `(shape, flat data)`.
    fn part_features(&self, shape: Vec<usize>, data: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let input = Tensor::new(shape, data).map_err(to_py)?;
        Ok(self.inner.part_features("input", &input).map_err(to_py)?.parts)
    }

    /// Query and gallery descriptors of a dataset.
    fn descriptors(&self, dataset: &Dataset) -> PyResult<(Vec<Descriptor>, Vec<Descriptor>)> {
        let (q, g) = eval::split_descriptors(&self.inner, &dataset.inner).map_err(to_py)?;
        Ok((q.into_iter().map(Into::into).collect(), g.into_iter().map(Into::into).collect()))
    }

    /// Standard-protocol evaluation; returns the metrics summary as JSON.
    #[pyo3(signature = (dataset, metric="cosine"))]
    fn evaluate(&self, dataset: &Dataset, metric: &str) -> PyResult<String> {
        let (q, g) = eval::split_descriptors(&self.inner, &dataset.inner).map_err(to_py)?;
        let e = eval::evaluate(&q, &g, self::metric(metric)?).map_err(to_py)?;
        Ok(e.summary.to_json())
    }
}

/// Trains on `dataset`; returns the model and the per-iteration combined
/// loss. With `out`, checkpoints and the iteration log are written there.
#[pyfunction]
#[pyo3(signature = (dataset, settings=None, out=None))]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    settings: Option<BTreeMap<String, String>>,
    out: Option<PathBuf>,
) -> PyResult<(Model, Vec<f64>)> {
    let config = run_config(settings)?.effective_train();
    let out = out.map(|dir| OutputDir { dir, resume: false });
    let data = &dataset.inner;
    let state = py
        .detach(|| core_train(&config, data, out.as_ref()))
        .map_err(to_py)?;
    let losses = state.log.iter().map(|r| r.combined).collect();
    Ok((Model { inner: state.model }, losses))
}

/// Finite-difference loss-gradient check; `(name, max relative error)` rows.
#[pyfunction]
#[pyo3(signature = (configs=50, seed=0))]
fn gradcheck(configs: usize, seed: u64) -> PyResult<Vec<(String, f64)>> {
    let spec = LossCheckSpec {
        configs,
        ..Default::default()
    };
    let rows = loss_gradient_report(seed, &spec).map_err(to_py)?;
    Ok(rows.into_iter().map(|r| (r.name.to_string(), r.max_error)).collect())
}

#[pymodule]
fn tcpm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<MemoryBank>()?;
    m.add_class::<Descriptor>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_ap, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
