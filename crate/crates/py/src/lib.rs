//! Python bindings: configs, runs, checkpoints, translation, and the scoring helpers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use modnet::data::{min_parts, SplitPlan};
use modnet::eval::{DecodeConfig, LengthPenalty, ModelTranslator};
use modnet::lang::{parse_langs, Direction};
use modnet::runner::{self, ExperimentConfig, Overrides, RunManifest};
use modnet::zoo::MultiModel;

fn to_py(e: modnet::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_value<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Parsed and validated experiment config.
#[pyclass(name = "Config", module = "modnet_py", frozen)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text, seed=None, out=None, deterministic=false, preset=None))]
    fn new(text: &str, seed: Option<u64>, out: Option<PathBuf>, deterministic: bool, preset: Option<String>) -> PyResult<Self> {
        let o = Overrides { seed, out, deterministic, preset };
        Ok(PyConfig { inner: ExperimentConfig::parse(text, &o).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, seed=None, out=None, deterministic=false, preset=None))]
    fn from_file(path: PathBuf, seed: Option<u64>, out: Option<PathBuf>, deterministic: bool, preset: Option<String>) -> PyResult<Self> {
        let o = Overrides { seed, out, deterministic, preset };
        Ok(PyConfig { inner: ExperimentConfig::from_file(&path, &o).map_err(to_py)? })
    }

    /// Copy with some keys replaced.
    fn with_keys(&self, changes: BTreeMap<String, String>) -> PyResult<Self> {
        let c: Vec<(&str, String)> = changes.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        Ok(PyConfig { inner: self.inner.with(&c).map_err(to_py)? })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn languages(&self) -> Vec<String> {
        self.inner.languages.iter().map(|l| l.to_string()).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn canonical(&self) -> String {
        self.inner.canonical()
    }

    fn __repr__(&self) -> String {
        format!("Config(kind={}, languages={:?}, seed={})", self.inner.kind, self.languages(), self.inner.seed)
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model", module = "modnet_py", frozen)]
struct PyModel {
    inner: MultiModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let (inner, _) = py.detach(|| modnet::train::checkpoint::load(&path)).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn languages(&self) -> Vec<String> {
        self.inner.languages().iter().map(|l| l.to_string()).collect()
    }

    /// Trained directions as `src-tgt` strings.
    #[getter]
    fn directions(&self) -> Vec<String> {
        self.inner.directions().iter().map(Direction::to_string).collect()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().numel()
    }

    fn frozen_languages(&self) -> Vec<String> {
        self.inner.frozen_languages().iter().map(|l| l.to_string()).collect()
    }

    /// Beam-search translation of whitespace-tokenized sentences.
    #[pyo3(signature = (direction, sentences, beam_size=4, alpha=0.6, gnmt=false, max_len=None))]
    fn translate(
        &self,
        py: Python<'_>,
        direction: &str,
        sentences: Vec<String>,
        beam_size: usize,
        alpha: f64,
        gnmt: bool,
        max_len: Option<usize>,
    ) -> PyResult<Vec<String>> {
        let d: Direction = direction.parse().map_err(to_py)?;
        let penalty = if gnmt { LengthPenalty::Gnmt } else { LengthPenalty::Fairseq };
        let decode = DecodeConfig { beam_size, alpha, penalty, max_len };
        decode.validate().map_err(to_py)?;
        let sources: Vec<Vec<String>> = sentences.iter().map(|s| tokens(s)).collect();
        let t = ModelTranslator { model: &self.inner, decode };
        let hyps = py.detach(|| modnet::eval::translate_all(&t, &d, &sources)).map_err(to_py)?;
        Ok(hyps.iter().map(|h| h.join(" ")).collect())
    }

    /// Mean encoder state of one sentence under `lang`'s encoder.
    fn encode(&self, lang: &str, sentence: &str) -> PyResult<Vec<f64>> {
        modnet::probe::pooled_repr(&self.inner, &lang.parse().map_err(to_py)?, &tokens(sentence)).map_err(to_py)
    }
}

/// Corpus BLEU (0-100) over whitespace-tokenized hypothesis and reference lines.
#[pyfunction]
fn corpus_bleu(hyps: Vec<String>, refs: Vec<String>) -> PyResult<f64> {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| tokens(s)).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| tokens(s)).collect();
    modnet::eval::corpus_bleu(&h, &r).map_err(to_py)
}

/// Non-sharing part assignment: `"a-b"` to a 1-based part index.
#[pyfunction]
#[pyo3(signature = (languages, parts=None))]
fn split_plan(languages: Vec<String>, parts: Option<usize>) -> PyResult<BTreeMap<String, usize>> {
    let langs = parse_langs(&languages.join(" ")).map_err(to_py)?;
    let plan = SplitPlan::circle(&langs, parts.unwrap_or_else(|| min_parts(langs.len()))).map_err(to_py)?;
    Ok(plan.iter().map(|(p, k)| (p.to_string(), k)).collect())
}

/// Runs every stage and returns the manifest as a dict.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let m = py.detach(|| runner::run(&config.inner)).map_err(to_py)?;
    json_value(py, &m)
}

/// Adds the configured language to the base run and returns the increment manifest.
#[pyfunction]
fn increment<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let o = py.detach(|| runner::increment(&config.inner)).map_err(to_py)?;
    json_value(py, &o.manifest)
}

/// Comparison table over finished run directories.
#[pyfunction]
#[pyo3(signature = (runs, tiers=false))]
fn report(runs: Vec<PathBuf>, tiers: bool) -> PyResult<String> {
    let ms: Vec<RunManifest> = runs.iter().map(|d| RunManifest::load(d)).collect::<modnet::Result<_>>().map_err(to_py)?;
    Ok(if tiers { runner::tier_report(&ms) } else { runner::report(&ms) })
}

#[pymodule]
fn modnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(split_plan, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(increment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
