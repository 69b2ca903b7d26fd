//! Python bindings: `import sci_py`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sci_core::autodiff::Tensor;
use sci_core::checkpoint::{self, Checkpoint};
use sci_core::config::RunConfig;
use sci_core::evalkit::{self, Protocol, SampleMeta};
use sci_core::model::SciModel;
use sci_core::synthdata::{self, Split};
use sci_core::{pipeline, sse, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn vector(v: Vec<f32>) -> Tensor {
    Tensor::from_vec(v)
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn protocols(names: Option<Vec<String>>) -> PyResult<Vec<Protocol>> {
    match names {
        None => Ok(Protocol::ALL.to_vec()),
        Some(v) => v.iter().map(|s| s.parse().map_err(py_err)).collect(),
    }
}

fn run_config(toml: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let base = match toml {
        Some(t) => RunConfig::from_toml_str(t).map_err(py_err)?,
        None => RunConfig::default(),
    };
    base.resolve(seed).map_err(py_err)
}

/// Projection of `f_clo` onto `f_id`.
#[pyfunction]
fn project(f_clo: Vec<f32>, f_id: Vec<f32>) -> PyResult<Vec<f32>> {
    sse::project(&vector(f_clo), &vector(f_id)).map(Tensor::into_data).map_err(py_err)
}

/// `f_id - f_proj`.
#[pyfunction]
fn orthogonalize(f_id: Vec<f32>, f_proj: Vec<f32>) -> PyResult<Vec<f32>> {
    sse::orthogonalize(&vector(f_id), &vector(f_proj)).map(Tensor::into_data).map_err(py_err)
}

#[pyfunction]
fn cosine_sim(a: Vec<f32>, b: Vec<f32>) -> PyResult<f32> {
    sci_core::autodiff::cosine_sim(&a, &b).map_err(py_err)
}

/// Scores query embeddings against a gallery. Metadata rows are
/// `(pid, clothes_id, camera_id)`. Returns a dict with `cmc`, `map`,
/// `num_valid_queries` and `num_skipped`.
#[pyfunction]
#[pyo3(signature = (query, gallery, query_meta, gallery_meta, protocol="general", kmax=20))]
fn evaluate_embeddings(
    py: Python<'_>,
    query: Vec<Vec<f32>>,
    gallery: Vec<Vec<f32>>,
    query_meta: Vec<(u32, u32, u32)>,
    gallery_meta: Vec<(u32, u32, u32)>,
    protocol: &str,
    kmax: usize,
) -> PyResult<Py<PyAny>> {
    let meta = |v: Vec<(u32, u32, u32)>| -> Vec<SampleMeta> {
        v.into_iter()
            .map(|(pid, clothes_id, camera_id)| SampleMeta { pid, clothes_id, camera_id })
            .collect()
    };
    let p: Protocol = protocol.parse().map_err(py_err)?;
    let r = evalkit::evaluate(&matrix(query)?, &matrix(gallery)?, &meta(query_meta), &meta(gallery_meta), p, kmax, 0)
        .map_err(py_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("cmc", r.cmc)?;
    d.set_item("map", r.map)?;
    d.set_item("num_valid_queries", r.num_valid_queries)?;
    d.set_item("num_skipped", r.num_skipped)?;
    Ok(d.into_any().unbind())
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: synthdata::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthesises the dataset of a TOML config (its `[synth]` section).
    #[staticmethod]
    #[pyo3(signature = (seed, config=None))]
    fn generate(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg = run_config(config, Some(seed))?;
        Ok(Self {
            inner: synthdata::generate(&cfg.synth).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: synthdata::load(&dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        pipeline::create_dir(&dir).map_err(py_err)?;
        synthdata::save(&self.inner, &dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(train, query, gallery)` sample counts.
    fn counts(&self) -> (usize, usize, usize) {
        (
            self.inner.count(Split::Train),
            self.inner.count(Split::Query),
            self.inner.count(Split::Gallery),
        )
    }

    /// `(height, width)` of every image.
    fn image_size(&self) -> (usize, usize) {
        (self.inner.height, self.inner.width)
    }

    /// Flattened `H x W x 3` pixels and `(pid, clothes_id, camera_id)`.
    fn sample(&self, i: usize) -> PyResult<(Vec<f32>, (u32, u32, u32))> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sample {i} out of range")))?;
        Ok((s.image.data().to_vec(), (s.pid, s.clothes_id, s.camera_id)))
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: SciModel,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Runs both training stages on `dataset` (or the config's synthetic
    /// set when omitted).
    #[staticmethod]
    #[pyo3(signature = (seed, config=None, dataset=None))]
    fn train(py: Python<'_>, seed: u64, config: Option<&str>, dataset: Option<&PyDataset>) -> PyResult<Self> {
        let cfg = run_config(config, Some(seed))?;
        let owned;
        let ds = match dataset {
            Some(d) => &d.inner,
            None => {
                owned = pipeline::obtain_dataset(&cfg).map_err(py_err)?;
                &owned
            }
        };
        let out = py.detach(|| pipeline::train(&cfg, ds)).map_err(py_err)?;
        Ok(Self {
            inner: out.model,
            config: cfg,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let (inner, run) = checkpoint::to_model(&ckpt).map_err(py_err)?;
        let config: RunConfig = serde_json::from_value(run["config"].clone())
            .map_err(|e| PyRuntimeError::new_err(format!("run config: {e}")))?;
        Ok(Self { inner, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::from_model(&self.inner, pipeline::checkpoint_record(&self.config))
            .and_then(|c| c.save(&path))
            .map_err(py_err)
    }

    /// Variant name, e.g. `"+sse+sim"`.
    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.variant.name()
    }

    /// Embedding of one flattened `H x W x 3` image.
    fn embed(&self, image: Vec<f32>) -> PyResult<Vec<f32>> {
        let enc = &self.inner.config.encoder;
        let img = Tensor::new([enc.height, enc.width, 3], image).map_err(py_err)?;
        sci_core::sim::extract_embedding(&self.inner, &img)
            .map(Tensor::into_data)
            .map_err(py_err)
    }

    /// Rank-1/5/10 and mAP per protocol on the query/gallery splits.
    #[pyo3(signature = (dataset, protocols=None, kmax=20))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        protocols: Option<Vec<String>>,
        kmax: usize,
    ) -> PyResult<Py<PyAny>> {
        let ps = self::protocols(protocols)?;
        let metrics = py
            .detach(|| pipeline::evaluate_model(&self.inner, &dataset.inner, &ps, kmax, 0))
            .map_err(py_err)?;
        let out = pyo3::types::PyDict::new(py);
        for m in metrics {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("rank1", m.rank1)?;
            d.set_item("rank5", m.rank5)?;
            d.set_item("rank10", m.rank10)?;
            d.set_item("map", m.map)?;
            d.set_item("num_valid_queries", m.num_valid_queries)?;
            out.set_item(m.protocol.name(), d)?;
        }
        Ok(out.into_any().unbind())
    }

    /// Rows of the constant identity text table used by stage 2.
    fn text_features(&self) -> PyResult<Vec<Vec<f32>>> {
        let cache = self
            .inner
            .text_cache
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("text features not computed"))?;
        Ok(rows_of(&cache.f_ort))
    }
}

#[pymodule]
fn sci_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(orthogonalize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_embeddings, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
