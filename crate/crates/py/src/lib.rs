//! Python bindings: `import wsi_pipeline`.
//!
//! Structured results (reports, summaries, manifests) cross the boundary as
//! plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use wsi_pipeline::aggregate::SlideVerdict;
use wsi_pipeline::annotations::summarize_dataset;
use wsi_pipeline::classify::{external_scores_load, extract_features as core_features, write_scores_csv};
use wsi_pipeline::config::ScorerChoice;
use wsi_pipeline::corpus::{generate_synthetic_corpus as core_synth, SynthOptions};
use wsi_pipeline::evaluate::{
    balanced_accuracy as core_bacc, per_class_metrics as core_metrics, run_pipeline as core_run,
    run_sweep as core_sweep, split_dataset, split_label, test_slide_manifest, ConfusionMatrix, ScorerFactory,
};
use wsi_pipeline::preprocess::Preprocessor;
use wsi_pipeline::raster::to_luma;
use wsi_pipeline::resampler::resize;
use wsi_pipeline::stainnorm::{estimate_stain_profile, normalize as core_normalize, MacenkoParams};
use wsi_pipeline::tiler::read_manifest as core_read_manifest;
use wsi_pipeline::{
    classify::{ExternalScorer, ScorerIdentity},
    ClassScores, Corpus, GroupedClass4, ImageBuffer, PreprocessMode, RunConfig, StainProfile, TissueClass6,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// Serializes through JSON into Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_mode(mode: &str) -> PyResult<PreprocessMode> {
    mode.parse().map_err(value_err)
}

/// An 8-bit image with 1 or 3 interleaved channels.
#[pyclass(name = "Image", module = "wsi_pipeline", skip_from_py_object)]
#[derive(Clone)]
pub struct Image {
    inner: ImageBuffer,
}

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, channels: u8, data: &[u8]) -> PyResult<Self> {
        Ok(Image { inner: ImageBuffer::new(width, height, channels, data.to_vec()).map_err(value_err)? })
    }

    #[staticmethod]
    fn read_png(path: PathBuf) -> PyResult<Self> {
        Ok(Image { inner: ImageBuffer::read_png(path).map_err(io_err)? })
    }

    fn write_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_png(path).map_err(io_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn channels(&self) -> u8 {
        self.inner.channels()
    }

    /// Row-major interleaved samples.
    fn tobytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.data())
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<Vec<u8>> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(value_err(format!("pixel ({x}, {y}) outside the image")));
        }
        Ok(self.inner.pixel(x, y).to_vec())
    }

    /// Lanczos-3 resize.
    fn resize(&self, py: Python<'_>, width: usize, height: usize) -> PyResult<Self> {
        let img = &self.inner;
        Ok(Image { inner: py.detach(|| resize(img, width, height)).map_err(value_err)? })
    }

    fn to_gray(&self) -> PyResult<Self> {
        Ok(Image { inner: to_luma(&self.inner).map_err(value_err)? })
    }

    fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> PyResult<Self> {
        Ok(Image { inner: self.inner.crop(x, y, width, height).map_err(value_err)? })
    }

    fn __eq__(&self, other: &Image) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.inner.width(), self.inner.height(), self.inner.channels())
    }
}

/// Macenko stain matrix (H, E columns) and 99th-percentile concentrations.
#[pyclass(name = "StainProfile", module = "wsi_pipeline", skip_from_py_object)]
#[derive(Clone)]
pub struct PyStainProfile {
    inner: StainProfile,
}

#[pymethods]
impl PyStainProfile {
    /// The built-in H&E reference.
    #[new]
    fn new() -> Self {
        PyStainProfile { inner: StainProfile::default() }
    }

    #[staticmethod]
    fn from_columns(hematoxylin: [f64; 3], eosin: [f64; 3], max_concentrations: [f64; 2]) -> PyResult<Self> {
        Ok(PyStainProfile { inner: StainProfile::new([hematoxylin, eosin], max_concentrations).map_err(value_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (image, io=255.0, beta=0.15, alpha=1.0))]
    fn estimate(image: &Image, io: f64, beta: f64, alpha: f64) -> PyResult<Self> {
        let params = MacenkoParams { io, beta, alpha, ..MacenkoParams::default() };
        Ok(PyStainProfile { inner: estimate_stain_profile(&image.inner, &params).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyStainProfile { inner: StainProfile::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn hematoxylin(&self) -> [f64; 3] {
        self.inner.hematoxylin()
    }

    #[getter]
    fn eosin(&self) -> [f64; 3] {
        self.inner.eosin()
    }

    #[getter]
    fn max_concentrations(&self) -> [f64; 2] {
        self.inner.max_concentrations()
    }

    fn __repr__(&self) -> String {
        format!("StainProfile(H={:?}, E={:?})", self.inner.hematoxylin(), self.inner.eosin())
    }
}

/// Maps `image` onto `reference` (default: built-in), estimating its source
/// profile unless given.
#[pyfunction]
#[pyo3(signature = (image, reference=None, source=None))]
fn normalize(image: &Image, reference: Option<&PyStainProfile>, source: Option<&PyStainProfile>) -> PyResult<Image> {
    let params = MacenkoParams::default();
    let reference = reference.map(|r| r.inner.clone()).unwrap_or_default();
    let source = match source {
        Some(s) => s.inner.clone(),
        None => estimate_stain_profile(&image.inner, &params).map_err(value_err)?,
    };
    Ok(Image { inner: core_normalize(&image.inner, &source, &reference, &params).map_err(value_err)? })
}

/// Applies an input mode (`rgb`, `gray`, `macenko`) the way the pipeline does.
#[pyfunction]
fn preprocess(image: &Image, mode: &str) -> PyResult<Image> {
    Ok(Image { inner: Preprocessor::new(parse_mode(mode)?).apply(&image.inner, None) })
}

/// Handcrafted baseline features of a preprocessed patch.
#[pyfunction]
fn extract_features(image: &Image, mode: &str) -> PyResult<Vec<f64>> {
    Ok(core_features(&image.inner, &parse_mode(mode)?.feature_config()))
}

/// Averages six-class patch scores (HP, NORM, TA.HG, TA.LG, TVA.HG, TVA.LG)
/// and votes over the grouped classes.
#[pyfunction]
#[pyo3(signature = (scores, slide_id="slide"))]
fn aggregate<'py>(py: Python<'py>, scores: Vec<[f64; 6]>, slide_id: &str) -> PyResult<Bound<'py, PyAny>> {
    let scores: Vec<ClassScores> =
        scores.into_iter().map(ClassScores::new).collect::<Result<_, _>>().map_err(value_err)?;
    let v = SlideVerdict::from_scores(slide_id, &scores).map_err(value_err)?;
    to_py(py, &v)
}

#[pyfunction]
fn balanced_accuracy(sensitivity: f64, specificity: f64) -> f64 {
    core_bacc(sensitivity, specificity)
}

/// Per-class metrics of a 4×4 slide confusion matrix, rows = truth,
/// in HP, NORM, HG, LG order.
#[pyfunction]
fn per_class_metrics<'py>(py: Python<'py>, counts: [[u64; 4]; 4]) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_metrics(&ConfusionMatrix::from_counts(counts)).map_err(value_err)?)
}

/// TOML run configuration.
#[pyclass(name = "RunConfig", module = "wsi_pipeline", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        PyRunConfig { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig { inner: RunConfig::from_toml(text).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig { inner: RunConfig::load(path).map_err(value_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[pyo3(signature = (check_inputs=false))]
    fn validate(&self, check_inputs: bool) -> PyResult<()> {
        self.inner.validate(check_inputs).map_err(value_err)
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn get_mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[setter]
    fn set_mode(&mut self, v: &str) -> PyResult<()> {
        self.inner.mode = parse_mode(v)?;
        Ok(())
    }

    #[getter]
    fn get_phi_um(&self) -> f64 {
        self.inner.patch.phi_um
    }

    #[setter]
    fn set_phi_um(&mut self, v: f64) {
        self.inner.patch.phi_um = v;
    }

    #[getter]
    fn get_scorer(&self) -> String {
        self.inner.scorer.to_string()
    }

    #[setter]
    fn set_scorer(&mut self, v: &str) -> PyResult<()> {
        self.inner.scorer = v.parse().map_err(value_err)?;
        Ok(())
    }

    #[getter]
    fn get_slides_dir(&self) -> PathBuf {
        self.inner.paths.slides_dir.clone()
    }

    #[setter]
    fn set_slides_dir(&mut self, v: PathBuf) {
        self.inner.paths.slides_dir = v;
    }

    #[getter]
    fn get_annotations_dir(&self) -> PathBuf {
        self.inner.paths.annotations_dir.clone()
    }

    #[setter]
    fn set_annotations_dir(&mut self, v: PathBuf) {
        self.inner.paths.annotations_dir = v;
    }

    #[getter]
    fn get_test_fraction(&self) -> f64 {
        self.inner.split.test_fraction_per_class
    }

    #[setter]
    fn set_test_fraction(&mut self, v: f64) {
        self.inner.split.test_fraction_per_class = v;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(mode={}, phi_um={}, scorer={})", self.inner.mode, self.inner.patch.phi_um, self.inner.scorer)
    }
}

/// Writes a synthetic corpus (`slides/`, `annotations/`) and returns its
/// slide ids.
#[pyfunction]
#[pyo3(signature = (out_dir, classes=6, per_class=10, seed=0))]
fn generate_synthetic_corpus(
    py: Python<'_>,
    out_dir: PathBuf,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> PyResult<Vec<String>> {
    if !(1..=6).contains(&classes) {
        return Err(value_err(format!("classes {classes} outside 1..=6")));
    }
    let opts = SynthOptions { per_class, classes: TissueClass6::ALL[..classes].to_vec(), seed, ..Default::default() };
    let corpus = py.detach(|| core_synth(&out_dir, &opts)).map_err(value_err)?;
    Ok(corpus.slides.iter().map(|s| s.slide_id().to_string()).collect())
}

#[pyclass(name = "Corpus", module = "wsi_pipeline")]
pub struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    #[new]
    fn new(slides_dir: PathBuf, annotations_dir: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus { inner: Corpus::load(slides_dir, annotations_dir).map_err(value_err)? })
    }

    #[getter]
    fn slide_ids(&self) -> Vec<String> {
        self.inner.slides.iter().map(|s| s.slide_id().to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.slides.len()
    }

    fn load_image(&self, slide_id: &str) -> PyResult<Image> {
        let slide = self.inner.slide(slide_id).ok_or_else(|| value_err(format!("unknown slide {slide_id}")))?;
        Ok(Image { inner: slide.load_image().map_err(io_err)? })
    }

    /// Most severe RoI class of a slide, or `None` without RoIs.
    fn slide_label(&self, slide_id: &str) -> PyResult<Option<&'static str>> {
        let slide = self.inner.slide(slide_id).ok_or_else(|| value_err(format!("unknown slide {slide_id}")))?;
        Ok(split_label(&slide.annotations).map(TissueClass6::title))
    }

    /// Per-class slide, RoI and area counts.
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &summarize_dataset(&self.inner.annotation_sets()))
    }

    /// The slide-level split under `config`'s split settings.
    fn split<'py>(&self, py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &split_dataset(&self.inner.annotation_sets(), &config.inner.split).map_err(value_err)?)
    }
}

fn scorer_factory(cfg: &RunConfig, corpus: &Corpus) -> PyResult<Box<dyn ScorerFactory>> {
    Ok(match &cfg.scorer {
        ScorerChoice::Baseline => Box::new(cfg.baseline_factory()),
        ScorerChoice::External(path) => {
            let split = split_dataset(&corpus.annotation_sets(), &cfg.split).map_err(value_err)?;
            let pc = cfg.pipeline_config().map_err(value_err)?;
            let manifest = test_slide_manifest(corpus, &split, &pc).map_err(value_err)?;
            let identity =
                ScorerIdentity { name: "external".into(), phi_um: cfg.patch.phi_um, mode: cfg.mode.name().into() };
            Box::new(ExternalScorer::load(path, &manifest, identity).map_err(value_err)?)
        }
    })
}

/// Trains (or loads external scores), runs whole-slide inference on the
/// test slides and returns `{"report": ..., "verdicts": [...]}`.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, config: &PyRunConfig, corpus: &PyCorpus) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, corpus) = (&config.inner, &corpus.inner);
    cfg.validate(false).map_err(value_err)?;
    let outcome = py.detach(|| -> PyResult<_> {
        let split = split_dataset(&corpus.annotation_sets(), &cfg.split).map_err(value_err)?;
        let pc = cfg.pipeline_config().map_err(value_err)?;
        let factory = scorer_factory(cfg, corpus)?;
        core_run(corpus, &split, &pc, factory.as_ref()).map_err(value_err)
    })?;
    #[derive(Serialize)]
    struct Out<'a> {
        report: &'a wsi_pipeline::evaluate::EvaluationReport,
        verdicts: Vec<&'a SlideVerdict>,
    }
    to_py(py, &Out { report: &outcome.report, verdicts: outcome.slides.iter().map(|s| &s.verdict).collect() })
}

/// Baseline sweep over fields of view and modes; one dict per cell.
#[pyfunction]
fn run_sweep<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    corpus: &PyCorpus,
    phis: Vec<f64>,
    modes: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, corpus) = (&config.inner, &corpus.inner);
    let modes: Vec<PreprocessMode> = modes.iter().map(|m| parse_mode(m)).collect::<PyResult<_>>()?;
    let table = py.detach(|| -> PyResult<_> {
        let split = split_dataset(&corpus.annotation_sets(), &cfg.split).map_err(value_err)?;
        let pc = cfg.pipeline_config().map_err(value_err)?;
        core_sweep(corpus, &split, &pc, &phis, &modes, &cfg.baseline_factory()).map_err(value_err)
    })?;
    to_py(py, &table.rows)
}

/// Manifest records of the test-slide patches an external scorer must
/// cover under `config`.
#[pyfunction]
fn test_manifest<'py>(py: Python<'py>, config: &PyRunConfig, corpus: &PyCorpus) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, corpus) = (&config.inner, &corpus.inner);
    let records = py.detach(|| -> PyResult<_> {
        let split = split_dataset(&corpus.annotation_sets(), &cfg.split).map_err(value_err)?;
        let pc = cfg.pipeline_config().map_err(value_err)?;
        test_slide_manifest(corpus, &split, &pc).map_err(value_err)
    })?;
    to_py(py, &records)
}

#[pyfunction]
fn read_manifest<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_read_manifest(path).map_err(io_err)?)
}

/// Loads a scores CSV against a manifest; returns `{patch_id: [6 probs]}`.
#[pyfunction]
fn load_external_scores(scores_csv: PathBuf, manifest: PathBuf) -> PyResult<BTreeMap<String, [f64; 6]>> {
    let records = core_read_manifest(manifest).map_err(io_err)?;
    let scores = external_scores_load(scores_csv, &records).map_err(value_err)?;
    Ok(scores.into_iter().map(|(k, v)| (k, *v.probs())).collect())
}

/// Writes `{patch_id: [6 probs]}` in the scores CSV layout.
#[pyfunction]
fn write_scores(path: PathBuf, scores: BTreeMap<String, [f64; 6]>) -> PyResult<()> {
    let rows: Vec<(String, ClassScores)> = scores
        .into_iter()
        .map(|(k, v)| ClassScores::new(v).map(|s| (k, s)))
        .collect::<Result<_, _>>()
        .map_err(value_err)?;
    write_scores_csv(path, rows.iter().map(|(k, s)| (k.as_str(), s))).map_err(io_err)
}

#[pymodule(name = "wsi_pipeline")]
fn wsi_pipeline_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<PyStainProfile>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(per_class_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(test_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(read_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(load_external_scores, m)?)?;
    m.add_function(wrap_pyfunction!(write_scores, m)?)?;
    m.add("CLASSES", TissueClass6::ALL.map(|c| c.title()).to_vec())?;
    m.add("GROUPED_CLASSES", GroupedClass4::ALL.map(|c| c.name()).to_vec())?;
    m.add("MODES", PreprocessMode::ALL.map(|c| c.name()).to_vec())?;
    Ok(())
}
