//! Python bindings. Structured results (validation reports, retrieval
//! summaries, attribution reports) cross the boundary as plain dicts and
//! lists built from their JSON form.

use std::path::PathBuf;

use artprompt::attribution::{self, ArtistDistances, Attributor as CoreAttributor, ReferenceGallery, ReferenceKind, ReferenceSet};
use artprompt::backbone::{Checkpoint, ImageStore, preprocess_file};
use artprompt::config::RunConfigDocument;
use artprompt::corpus::{self, ArtistLabel, DatasetManifest, Split, TrainFraction};
use artprompt::evaluation::{self, DistanceMatrix, LabelledId, DEFAULT_N_MAX, DEFAULT_THRESHOLDS};
use artprompt::siamese::{self, LossConfig as CoreLoss, MetricModel, PairLabel};
use artprompt::toy::{self, ToyConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(artprompt, ArtpromptError, PyException);

fn err(e: artprompt::Error) -> PyErr {
    ArtpromptError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| ArtpromptError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn label(y: u8) -> PyResult<PairLabel> {
    PairLabel::try_from(y).map_err(err)
}

fn parse_split(split: Option<&str>) -> PyResult<Option<Split>> {
    match split {
        None | Some("all") => Ok(None),
        Some("train") => Ok(Some(Split::Train)),
        Some("val") => Ok(Some(Split::Val)),
        Some(other) => Err(ArtpromptError::new_err(format!("unknown split {other:?} (train, val or all)"))),
    }
}

/// Exponential contrastive loss with its derived constants.
#[pyclass(name = "LossConfig", from_py_object)]
#[derive(Clone)]
struct PyLossConfig {
    inner: CoreLoss,
}

#[pymethods]
impl PyLossConfig {
    #[new]
    #[pyo3(signature = (c_p = 0.2, c_n = 10.0))]
    fn new(c_p: f64, c_n: f64) -> PyResult<Self> {
        let inner = CoreLoss { c_p, c_n, ..CoreLoss::default() };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn c_p(&self) -> f64 {
        self.inner.c_p
    }

    #[getter]
    fn c_n(&self) -> f64 {
        self.inner.c_n
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    /// Loss of one pair at distance `d` with label `y` (0 similar, 1 dissimilar).
    fn loss(&self, d: f64, y: u8) -> PyResult<f64> {
        siamese::contrastive_loss(d, label(y)?, &self.inner).map_err(err)
    }

    /// dL/dD at `d`.
    fn derivative(&self, d: f64, y: u8) -> PyResult<f64> {
        siamese::contrastive_loss_derivative(d, label(y)?, &self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("LossConfig(c_p={}, c_n={})", self.inner.c_p, self.inner.c_n)
    }
}

#[pyfunction]
#[pyo3(signature = (d, y, c_p = 0.2, c_n = 10.0))]
fn contrastive_loss(d: f64, y: u8, c_p: f64, c_n: f64) -> PyResult<f64> {
    PyLossConfig::new(c_p, c_n)?.loss(d, y)
}

/// `1 - min_d`, or `None` when the nearest reference is farther than 1.
#[pyfunction]
fn attribution_probability(min_d: f64) -> PyResult<Option<f64>> {
    attribution::attribution_probability(min_d).map_err(err)
}

#[pyfunction]
fn similarity(d: f64) -> f64 {
    attribution::similarity(d)
}

#[pyfunction]
fn vote_count(distances: Vec<(String, f64)>, threshold: f64) -> usize {
    attribution::vote_count(&distances, threshold)
}

/// Report from precomputed distances. `per_artist` maps each artist to its
/// `(reference_id, distance)` pairs; artist ids follow the mapping's order.
#[pyfunction]
fn attribute<'py>(
    py: Python<'py>,
    query: &str,
    per_artist: Vec<(String, Vec<(String, f64)>)>,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let groups: Vec<ArtistDistances> = per_artist
        .into_iter()
        .enumerate()
        .map(|(i, (name, distances))| ArtistDistances {
            artist: ArtistLabel::new(name, i as u32),
            distances,
        })
        .collect();
    let report = attribution::attribute(query, &groups, threshold).map_err(err)?;
    to_py(py, &report)
}

/// P(n) summaries for a query-by-gallery distance matrix. Queries and
/// gallery items are `(id, artist)` pairs.
#[pyfunction]
#[pyo3(signature = (queries, gallery, distances, thresholds = None, n_max = DEFAULT_N_MAX))]
fn retrieval_test<'py>(
    py: Python<'py>,
    queries: Vec<(String, String)>,
    gallery: Vec<(String, String)>,
    distances: Vec<Vec<f64>>,
    thresholds: Option<Vec<f64>>,
    n_max: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let ids = |v: Vec<(String, String)>| v.into_iter().map(|(id, a)| LabelledId::new(id, a)).collect();
    let matrix = DistanceMatrix::new(ids(queries), ids(gallery), distances).map_err(err)?;
    let thresholds = thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
    let summaries = evaluation::retrieval_test(&matrix, &thresholds, n_max).map_err(err)?;
    to_py(py, &summaries)
}

#[pyclass(name = "Manifest", from_py_object)]
#[derive(Clone)]
struct PyManifest {
    inner: DatasetManifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: DatasetManifest::load(path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn artists(&self) -> Vec<String> {
        self.inner.artists.iter().map(|a| a.name.clone()).collect()
    }

    /// Per-artist counts and violations; checks files when `root` is given.
    #[pyo3(signature = (root = None))]
    fn validate<'py>(&self, py: Python<'py>, root: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &corpus::validate_manifest(&self.inner, root.as_deref()))
    }

    #[pyo3(signature = (seed, fraction = "4/5"))]
    fn split(&self, seed: u64, fraction: &str) -> PyResult<Self> {
        let f: TrainFraction = fraction.parse().map_err(err)?;
        Ok(Self { inner: corpus::split_dataset(&self.inner, f, seed).map_err(err)? })
    }

    /// Balanced mix with `quota` originals and `quota` synthetics per artist.
    fn mix(&self, quota: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: corpus::build_mixed_dataset(&self.inner, quota, seed).map_err(err)? })
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.records)
    }

    fn __repr__(&self) -> String {
        format!("Manifest({} records, {} artists)", self.inner.records.len(), self.inner.artists.len())
    }
}

/// Writes a procedural corpus under `root` and returns its unsplit manifest.
#[pyfunction]
#[pyo3(signature = (root, styles = 5, originals = 40, synthetics = 40, seed = 0))]
fn generate_toy_corpus(root: PathBuf, styles: usize, originals: usize, synthetics: usize, seed: u64) -> PyResult<PyManifest> {
    let cfg = ToyConfig {
        styles,
        originals_per_style: originals,
        synthetics_per_style: synthetics,
        seed,
        ..Default::default()
    };
    Ok(PyManifest { inner: toy::generate_toy_corpus(&root, &cfg).map_err(err)? })
}

#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfigDocument,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfigDocument::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = RunConfigDocument::from_toml(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

/// A metric checkpoint plus embedded reference sets, ready to attribute
/// query images.
#[pyclass(name = "Attributor", unsendable)]
struct PyAttributor {
    inner: CoreAttributor,
    images: ImageStore,
    manifest: DatasetManifest,
}

#[pymethods]
impl PyAttributor {
    #[new]
    #[pyo3(signature = (checkpoint, manifest, root, refs = "synthetic", threshold = 0.5, split = None, batch_size = 32))]
    fn new(
        checkpoint: PathBuf,
        manifest: &PyManifest,
        root: PathBuf,
        refs: &str,
        threshold: f64,
        split: Option<&str>,
        batch_size: usize,
    ) -> PyResult<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(ArtpromptError::new_err(format!("threshold {threshold} outside (0, 1)")));
        }
        let kind: ReferenceKind = refs.parse().map_err(err)?;
        let sets = ReferenceSet::all_from_manifest(&manifest.inner, kind, parse_split(split)?).map_err(err)?;
        let model = MetricModel::load(&Checkpoint::open(&checkpoint).map_err(err)?).map_err(err)?;
        let images = ImageStore::cached(&root, model.model().config());
        let gallery = ReferenceGallery::build(&model, sets, &manifest.inner, &images, None, batch_size).map_err(err)?;
        Ok(Self {
            inner: CoreAttributor { model, gallery, threshold },
            images,
            manifest: manifest.inner.clone(),
        })
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    fn attribute_file<'py>(&self, py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.attribute_file(&path).map_err(err)?)
    }

    fn attribute_record<'py>(&self, py: Python<'py>, record_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let record = self
            .manifest
            .record(record_id)
            .ok_or_else(|| err(artprompt::Error::UnknownRecord(record_id.into())))?;
        to_py(py, &self.inner.attribute_record(record, &self.images).map_err(err)?)
    }

    /// Learned distance between two image files.
    fn distance(&self, a: PathBuf, b: PathBuf) -> PyResult<f64> {
        let cfg = self.inner.model.model().config();
        let x = preprocess_file(&a, &a.to_string_lossy(), cfg).map_err(err)?;
        let y = preprocess_file(&b, &b.to_string_lossy(), cfg).map_err(err)?;
        self.inner.model.distance(&x, &y).map_err(err)
    }
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    artprompt::cli::main_with_args(std::iter::once("artprompt".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "artprompt")]
pub fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ArtpromptError", m.py().get_type::<ArtpromptError>())?;
    m.add_class::<PyLossConfig>()?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyAttributor>()?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(attribution_probability, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(vote_count, m)?)?;
    m.add_function(wrap_pyfunction!(attribute, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_test, m)?)?;
    m.add_function(wrap_pyfunction!(generate_toy_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
