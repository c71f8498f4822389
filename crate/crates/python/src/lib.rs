//! Python bindings: text preparation, mock embeddings, the vector index,
//! a configurable engine and the blind-evaluation helpers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use corpusqa::config::AppConfig;
use corpusqa::harness::{self, Assignment, EvalKey, Judgment, Preference, Response};
use corpusqa::{
    chunk_document, cosine_similarity as core_cosine, l2_normalize as core_l2_normalize, load_document,
    mock_embed as core_mock_embed, normalize, ChunkingPolicy, DocFormat, EmbeddingVector, GenerationParams,
    IndexEntry, RetrievalParams, SystemPromptPreset,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

create_exception!(corpusqa, CorpusQaError, PyException);

fn fail(e: impl std::fmt::Display) -> PyErr {
    CorpusQaError::new_err(e.to_string())
}

fn parse_format(format: Option<&str>) -> PyResult<Option<DocFormat>> {
    format
        .map(|f| f.parse::<DocFormat>().map_err(|e| PyValueError::new_err(e.to_string())))
        .transpose()
}

/// Hands a serializable value to Python as plain dicts and lists.
fn to_python<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(fail)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn vector(values: Vec<f64>) -> PyResult<EmbeddingVector> {
    EmbeddingVector::new(values).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Normalizes `text` and returns its word stream.
#[pyfunction]
#[pyo3(signature = (text, format = "plain"))]
fn normalize_text(text: &str, format: &str) -> PyResult<Vec<String>> {
    let raw = load_document("input", text.as_bytes(), parse_format(Some(format))?, "input").map_err(fail)?;
    Ok(normalize(&raw).words)
}

/// Splits `text` into overlapping word windows.
#[pyfunction]
#[pyo3(signature = (text, doc_id = "doc", chunk_words = 500, overlap_words = 50, format = None))]
fn chunk<'py>(
    py: Python<'py>,
    text: &str,
    doc_id: &str,
    chunk_words: usize,
    overlap_words: usize,
    format: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let policy = ChunkingPolicy::new(chunk_words, overlap_words).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let format = parse_format(format)?.unwrap_or(DocFormat::Plain);
    let raw = load_document(doc_id, text.as_bytes(), Some(format), doc_id).map_err(fail)?;
    let chunks = chunk_document(&normalize(&raw), policy).map_err(fail)?;
    to_python(py, &chunks)
}

#[pyfunction]
#[pyo3(signature = (text, dim = 768, seed = 0))]
fn mock_embed(text: &str, dim: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(core_mock_embed(text, dim, seed).map_err(fail)?.into_values())
}

#[pyfunction]
fn l2_normalize(values: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(core_l2_normalize(&values).map_err(fail)?.into_values())
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    core_cosine(&vector(a)?, &vector(b)?).map_err(fail)
}

/// In-memory exact cosine index with JSON-lines persistence.
#[pyclass(name = "VectorIndex")]
struct PyVectorIndex {
    inner: corpusqa::VectorIndex,
}

#[pymethods]
impl PyVectorIndex {
    #[new]
    fn new() -> Self {
        PyVectorIndex { inner: corpusqa::VectorIndex::new() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVectorIndex { inner: corpusqa::VectorIndex::load(path).map_err(fail)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(fail)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }

    #[getter]
    fn model_name(&self) -> Option<String> {
        self.inner.model_name().map(str::to_string)
    }

    /// Inserts or replaces one entry. The vector is normalized first.
    #[pyo3(signature = (chunk_id, doc_id, text, vector, model_name = "python"))]
    fn add(&mut self, chunk_id: String, doc_id: String, text: String, vector: Vec<f64>, model_name: &str) -> PyResult<()> {
        let entry = IndexEntry {
            chunk_id,
            doc_id,
            text,
            meta: BTreeMap::new(),
            vector: core_l2_normalize(&vector).map_err(fail)?,
        };
        self.inner.upsert(model_name, vec![entry]).map_err(fail)?;
        Ok(())
    }

    /// Returns `(chunk_id, doc_id, score, text)` tuples, best first.
    fn top_k(&self, query: Vec<f64>, k: usize) -> PyResult<Vec<(String, String, f64, String)>> {
        let hits = self.inner.top_k(&vector(query)?, k).map_err(fail)?;
        Ok(hits.into_iter().map(|h| (h.chunk_id, h.doc_id, h.score, h.text)).collect())
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &self.inner.manifest())
    }
}

/// The full pipeline. Without a config it runs on the mock backends.
#[pyclass(name = "Engine")]
struct PyEngine {
    inner: corpusqa::Engine,
    config: AppConfig,
}

impl PyEngine {
    fn params(
        &self,
        top_k: Option<usize>,
        temperature: Option<f64>,
        max_tokens: Option<usize>,
        seed: Option<u64>,
    ) -> (RetrievalParams, GenerationParams) {
        let d = &self.config.defaults;
        (
            RetrievalParams { top_k: top_k.unwrap_or(d.top_k) },
            GenerationParams {
                temperature: temperature.unwrap_or(d.temperature),
                max_tokens: max_tokens.unwrap_or(d.max_tokens),
                seed,
            },
        )
    }

    fn preset(&self, id: Option<&str>, text: Option<&str>) -> PyResult<SystemPromptPreset> {
        match id {
            Some(id) => SystemPromptPreset::resolve(id, text).map_err(fail),
            None => self.config.preset().map_err(fail),
        }
    }
}

#[pymethods]
impl PyEngine {
    /// `config_json` uses the same layout as the CLI config file.
    #[new]
    #[pyo3(signature = (config_json = None, index_path = None))]
    fn new(config_json: Option<&str>, index_path: Option<PathBuf>) -> PyResult<Self> {
        let config = match config_json {
            Some(text) => AppConfig::from_json(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => AppConfig::default(),
        };
        config.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        let index = match index_path {
            Some(path) => AppConfig::open_index(&path).map_err(fail)?,
            None => corpusqa::VectorIndex::new(),
        };
        Ok(PyEngine { inner: config.build_engine(index).map_err(fail)?, config })
    }

    /// Chunks, embeds and indexes one document; returns the chunk count.
    #[pyo3(signature = (doc_id, text, format = None))]
    fn ingest(&self, py: Python<'_>, doc_id: &str, text: &str, format: Option<&str>) -> PyResult<usize> {
        let raw = load_document(doc_id, text.as_bytes(), Some(parse_format(format)?.unwrap_or(DocFormat::Plain)), doc_id)
            .map_err(fail)?;
        let policy = self.config.chunking;
        py.detach(|| self.inner.ingest(&raw, policy)).map_err(fail)
    }

    fn __len__(&self) -> usize {
        self.inner.index().len()
    }

    fn save_index(&self, path: PathBuf) -> PyResult<()> {
        self.inner.index().save(path).map_err(fail)
    }

    #[pyo3(signature = (text, top_k = None, temperature = None, max_tokens = None, system_prompt_id = None, system_prompt = None, seed = None))]
    #[allow(clippy::too_many_arguments)]
    fn query<'py>(
        &self,
        py: Python<'py>,
        text: &str,
        top_k: Option<usize>,
        temperature: Option<f64>,
        max_tokens: Option<usize>,
        system_prompt_id: Option<&str>,
        system_prompt: Option<&str>,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (rp, gp) = self.params(top_k, temperature, max_tokens, seed);
        let preset = self.preset(system_prompt_id, system_prompt)?;
        let budget = self.config.defaults.budget_tokens;
        let result = py
            .detach(|| self.inner.answer_query(text, &rp, &gp, &preset, budget))
            .map_err(fail)?;
        to_python(py, &result)
    }

    #[pyo3(signature = (system_prompt_id = None, system_prompt = None, memory_window = None))]
    fn create_session(
        &self,
        system_prompt_id: Option<&str>,
        system_prompt: Option<&str>,
        memory_window: Option<usize>,
    ) -> PyResult<String> {
        let preset = self.preset(system_prompt_id, system_prompt)?;
        self.inner
            .create_session(preset, memory_window.unwrap_or(self.config.defaults.memory_window))
            .map_err(fail)
    }

    /// Runs one chat turn; the result carries an extra `turn_index` key.
    #[pyo3(signature = (session_id, text, top_k = None, temperature = None, max_tokens = None, seed = None))]
    #[allow(clippy::too_many_arguments)]
    fn chat<'py>(
        &self,
        py: Python<'py>,
        session_id: &str,
        text: &str,
        top_k: Option<usize>,
        temperature: Option<f64>,
        max_tokens: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (rp, gp) = self.params(top_k, temperature, max_tokens, seed);
        let budget = self.config.defaults.budget_tokens;
        let (result, turn_index) = py
            .detach(|| self.inner.chat_turn(session_id, text, &rp, &gp, budget))
            .map_err(fail)?;
        let out = to_python(py, &result)?;
        out.cast::<PyDict>()?.set_item("turn_index", turn_index)?;
        Ok(out)
    }

    fn transcript<'py>(&self, py: Python<'py>, session_id: &str) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &self.inner.session(session_id).map_err(fail)?)
    }
}

/// Builds seeded blind pairs from two lists of `(query, answer)`.
/// Returns `(pairs, key)`; keep the key away from the judges.
#[pyfunction]
fn make_blind_pairs<'py>(
    py: Python<'py>,
    a: Vec<(String, String)>,
    b: Vec<(String, String)>,
    seed: u64,
) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let responses = |v: Vec<(String, String)>| -> Vec<Response> {
        v.into_iter().map(|(query, answer)| Response { query, answer }).collect()
    };
    let (pairs, key) = harness::make_blind_pairs(&responses(a), &responses(b), seed).map_err(fail)?;
    Ok((to_python(py, &pairs)?, to_python(py, &key)?))
}

/// Scores `(pair_id, factual_left, factual_right, preferred)` judgments,
/// where `preferred` is "left", "right" or "tie".
#[pyfunction]
fn score<'py>(
    py: Python<'py>,
    key: BTreeMap<String, String>,
    judgments: Vec<(String, bool, bool, String)>,
) -> PyResult<Bound<'py, PyAny>> {
    let key = key
        .into_iter()
        .map(|(id, side)| match side.as_str() {
            "A_left" => Ok((id, Assignment::ALeft)),
            "A_right" => Ok((id, Assignment::ARight)),
            other => Err(PyValueError::new_err(format!("bad assignment `{other}`"))),
        })
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    let judgments = judgments
        .into_iter()
        .map(|(pair_id, factual_left, factual_right, preferred)| {
            let preferred = match preferred.as_str() {
                "left" => Preference::Left,
                "right" => Preference::Right,
                "tie" => Preference::Tie,
                other => return Err(PyValueError::new_err(format!("bad preference `{other}`"))),
            };
            Ok(Judgment { pair_id, factual_left, factual_right, preferred, comment: String::new() })
        })
        .collect::<PyResult<Vec<_>>>()?;
    to_python(py, &harness::score(&EvalKey(key), &judgments).map_err(fail)?)
}

#[pymodule]
#[pyo3(name = "corpusqa")]
pub fn corpusqa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CorpusQaError", m.py().get_type::<CorpusQaError>())?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(chunk, m)?)?;
    m.add_function(wrap_pyfunction!(mock_embed, m)?)?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(make_blind_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_class::<PyVectorIndex>()?;
    m.add_class::<PyEngine>()?;
    Ok(())
}
