//! Python bindings: feature maps, the descriptor store, heads, fusion,
//! re-ranking and evaluation. Heavy calls release the GIL.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use patchrank::store::{decode_feature_map, encode_feature_map};
use patchrank::synth::{write_dataset, SynthConfig};
use patchrank::tsv::parse_ranked;
use patchrank::{Error, GlobalDescriptor, RankedEntry, RankedList};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py(e: Error) -> PyErr {
    match e.root() {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "FeatureMap", module = "patchrank_py", from_py_object)]
#[derive(Clone)]
struct PyFeatureMap {
    inner: patchrank::FeatureMap,
}

#[pymethods]
impl PyFeatureMap {
    /// `data` is row-major (h, w, c).
    #[new]
    fn new(id: String, height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        let inner = patchrank::FeatureMap::new(id, height, width, channels, data).map_err(to_py)?;
        Ok(PyFeatureMap { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyFeatureMap {
            inner: patchrank::read_feature_file(path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        patchrank::write_feature_file(&self.inner, path).map_err(to_py)
    }

    /// Serialized PRFM bytes.
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &encode_feature_map(&self.inner))
    }

    #[staticmethod]
    fn from_bytes(id: String, data: &[u8]) -> PyResult<Self> {
        Ok(PyFeatureMap {
            inner: decode_feature_map(id, data).map_err(to_py)?,
        })
    }

    #[getter]
    fn id(&self) -> &str {
        self.inner.id()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height(), self.inner.width(), self.inner.channels())
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.shape();
        format!("FeatureMap(id={:?}, shape=({h}, {w}, {c}))", self.inner.id())
    }
}

/// Mean over spatial positions, not normalized.
#[pyfunction]
fn average_pool(map: &PyFeatureMap) -> Vec<f32> {
    patchrank::average_pool(&map.inner).vector
}

#[pyfunction]
fn l2_normalize(vector: Vec<f32>) -> PyResult<Vec<f32>> {
    patchrank::l2_normalize(&vector).map_err(to_py)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f32>, b: Vec<f32>) -> PyResult<f32> {
    patchrank::cosine_similarity(&a, &b).map_err(to_py)
}

/// Directional patch-matching score of `doc` against `query`.
#[pyfunction]
fn local_score(query: &PyFeatureMap, doc: &PyFeatureMap) -> PyResult<f32> {
    let q = patchrank::extract_patches(&query.inner).map_err(to_py)?;
    let d = patchrank::extract_patches(&doc.inner).map_err(to_py)?;
    patchrank::local_score(&q, &d).map_err(to_py)
}

#[pyclass(name = "ProjectionHead", module = "patchrank_py", from_py_object)]
#[derive(Clone)]
struct PyProjectionHead {
    inner: patchrank::ProjectionHead,
}

#[pymethods]
impl PyProjectionHead {
    #[staticmethod]
    fn identity(dim: usize) -> Self {
        PyProjectionHead {
            inner: patchrank::ProjectionHead::identity(dim),
        }
    }

    #[staticmethod]
    fn random(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        PyProjectionHead {
            inner: patchrank::ProjectionHead::random(in_dim, out_dim, seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyProjectionHead {
            inner: patchrank::ProjectionHead::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.encode())
    }

    #[getter]
    fn in_dim(&self) -> usize {
        self.inner.in_dim()
    }

    #[getter]
    fn out_dim(&self) -> usize {
        self.inner.out_dim()
    }

    /// Projects a pooled descriptor and L2-normalizes the result.
    fn project(&self, vector: Vec<f32>) -> PyResult<Vec<f32>> {
        let d = GlobalDescriptor {
            id: String::new(),
            vector,
            normalized: false,
        };
        Ok(self.inner.project(&d).map_err(to_py)?.vector)
    }
}

/// Trains a head on the pooled descriptors of the manifest's train split.
/// Returns the head and the mean loss of every epoch.
#[pyfunction]
#[pyo3(signature = (manifest, epochs=20, learning_rate=1.5e-4, margin=0.5, classes_per_batch=4, samples_per_class=4, out_dim=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_head(
    py: Python<'_>,
    manifest: PathBuf,
    epochs: usize,
    learning_rate: f64,
    margin: f64,
    classes_per_batch: usize,
    samples_per_class: usize,
    out_dim: Option<usize>,
    seed: u64,
) -> PyResult<(PyProjectionHead, Vec<f64>)> {
    let config = patchrank::TrainerConfig {
        epochs,
        learning_rate,
        margin,
        classes_per_batch,
        samples_per_class,
        out_dim,
        seed,
        ..Default::default()
    };
    let outcome = py
        .detach(|| {
            let manifest = patchrank::load_manifest(manifest)?;
            let samples = patchrank::pipeline::pooled_samples(&manifest, patchrank::Split::Train)?;
            patchrank::train_head(&config, &samples)
        })
        .map_err(to_py)?;
    let losses = outcome.log.iter().map(|l| l.mean_loss).collect();
    Ok((PyProjectionHead { inner: outcome.head }, losses))
}

#[pyclass(name = "FusionModel", module = "patchrank_py", skip_from_py_object)]
#[derive(Clone)]
struct PyFusionModel {
    inner: patchrank::FusionModel,
}

#[pymethods]
impl PyFusionModel {
    /// `alpha * global + (1 - alpha) * local`.
    #[staticmethod]
    fn linear(alpha: f32) -> PyResult<Self> {
        Ok(PyFusionModel {
            inner: patchrank::FusionModel::linear(alpha).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFusionModel {
            inner: patchrank::FusionModel::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.encode())
    }

    fn fuse(&self, global_score: f32, local_score: f32) -> f32 {
        patchrank::fuse(global_score, local_score, &self.inner)
    }
}

#[pyclass(name = "DescriptorStore", module = "patchrank_py")]
struct PyDescriptorStore {
    inner: patchrank::DescriptorStore,
}

#[pymethods]
impl PyDescriptorStore {
    /// Builds from the manifest's index split. Returns the store and the
    /// `(id, reason)` pairs of skipped documents.
    #[staticmethod]
    #[pyo3(signature = (manifest, head=None))]
    fn build(
        py: Python<'_>,
        manifest: PathBuf,
        head: Option<PyProjectionHead>,
    ) -> PyResult<(Self, Vec<(String, String)>)> {
        let outcome = py
            .detach(|| {
                let manifest = patchrank::load_manifest(manifest)?;
                patchrank::build_store(&manifest, head.as_ref().map(|h| &h.inner))
            })
            .map_err(to_py)?;
        let skipped = outcome.skipped.into_iter().map(|s| (s.id, s.reason)).collect();
        Ok((PyDescriptorStore { inner: outcome.store }, skipped))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDescriptorStore {
            inner: patchrank::DescriptorStore::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    fn label_of(&self, id: &str) -> Option<String> {
        self.inner.label_of(id).map(str::to_string)
    }

    /// Top `k` rows by cosine similarity to `vector`, which is normalized first.
    #[pyo3(signature = (vector, k=100))]
    fn search(&self, py: Python<'_>, vector: Vec<f32>, k: usize) -> PyResult<Vec<(String, f32)>> {
        let list = py
            .detach(|| {
                let q = GlobalDescriptor {
                    id: "query".into(),
                    vector,
                    normalized: false,
                }
                .normalize()?;
                patchrank::top_k(&q, &self.inner, k)
            })
            .map_err(to_py)?;
        Ok(list.entries.into_iter().map(|e| (e.doc_id, e.score)).collect())
    }

    /// Pools `map` (projecting through `head` if given) and searches.
    #[pyo3(signature = (map, k=100, head=None))]
    fn search_map(
        &self,
        py: Python<'_>,
        map: &PyFeatureMap,
        k: usize,
        head: Option<PyProjectionHead>,
    ) -> PyResult<Vec<(String, f32)>> {
        let list = py
            .detach(|| {
                let q = patchrank::store::stage_one_descriptor(&map.inner, head.as_ref().map(|h| &h.inner))?;
                patchrank::top_k(&q, &self.inner, k)
            })
            .map_err(to_py)?;
        Ok(list.entries.into_iter().map(|e| (e.doc_id, e.score)).collect())
    }
}

/// Re-ranks `candidates` (`(doc_id, global_score)` in stage-1 order) using
/// the maps in `maps`. Returns `(doc_id, final, global, local)` tuples.
#[pyfunction]
fn rerank(
    py: Python<'_>,
    query: &PyFeatureMap,
    candidates: Vec<(String, f32)>,
    maps: HashMap<String, PyFeatureMap>,
    fusion: &PyFusionModel,
) -> PyResult<Vec<(String, f32, f32, f32)>> {
    let maps: HashMap<String, patchrank::FeatureMap> = maps.into_iter().map(|(k, v)| (k, v.inner)).collect();
    let initial = RankedList {
        query_id: query.inner.id().to_string(),
        entries: candidates
            .into_iter()
            .map(|(doc_id, score)| RankedEntry { doc_id, score })
            .collect(),
        k_limit: patchrank::DEFAULT_K,
    };
    let out = py
        .detach(|| patchrank::rerank(query.inner.id(), &query.inner, &initial, &maps, &fusion.inner))
        .map_err(to_py)?;
    Ok(out
        .entries
        .into_iter()
        .map(|p| (p.doc_id, p.final_score, p.global_score, p.local_score))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (ranked, relevant, k=100))]
fn average_precision_at_k(ranked: Vec<String>, relevant: HashSet<String>, k: usize) -> PyResult<f64> {
    patchrank::average_precision_at_k(&ranked, &relevant, k).map_err(to_py)
}

/// Evaluates a ranked-list TSV file against a manifest. Returns mAP@k and
/// the per-query `(query_id, ap)` pairs.
#[pyfunction]
#[pyo3(signature = (ranked, manifest, k=100))]
fn evaluate(ranked: PathBuf, manifest: PathBuf, k: usize) -> PyResult<(f64, Vec<(String, f64)>)> {
    let text =
        std::fs::read_to_string(&ranked).map_err(|e| PyIOError::new_err(format!("{}: {e}", ranked.display())))?;
    let lists = parse_ranked(&text, k).map_err(to_py)?;
    let manifest = patchrank::load_manifest(manifest).map_err(to_py)?;
    let report = patchrank::evaluate(&lists, &manifest).map_err(to_py)?;
    Ok((
        report.map_at_k,
        report.per_query.into_iter().map(|q| (q.query_id, q.ap)).collect(),
    ))
}

/// Writes a synthetic dataset to `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, classes=20, per_class=10, height=7, width=7, channels=64, noise=0.0, permute=false, seed=0, group_size=1))]
#[allow(clippy::too_many_arguments)]
fn synth(
    out_dir: PathBuf,
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    channels: usize,
    noise: f32,
    permute: bool,
    seed: u64,
    group_size: usize,
) -> PyResult<PathBuf> {
    let config = SynthConfig {
        classes,
        per_class,
        height,
        width,
        channels,
        noise,
        permute,
        seed,
        group_size,
        ..Default::default()
    };
    write_dataset(&config, out_dir).map_err(to_py)
}

#[pymodule]
fn patchrank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyProjectionHead>()?;
    m.add_class::<PyFusionModel>()?;
    m.add_class::<PyDescriptorStore>()?;
    m.add_function(wrap_pyfunction!(average_pool, m)?)?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(local_score, m)?)?;
    m.add_function(wrap_pyfunction!(train_head, m)?)?;
    m.add_function(wrap_pyfunction!(rerank, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add("DEFAULT_K", patchrank::DEFAULT_K)?;
    Ok(())
}
