//! Python bindings for `fusionlink`.
//!
//! Spans are `(start, end, entity_id)` tuples with character offsets, end
//! exclusive. Validation errors surface as `ValueError`, everything else as
//! `RuntimeError`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fusionlink::cli::{self, GradcheckArgs};
use fusionlink::eval;
use fusionlink::grammar::{self, ElPrediction, LinkedEntity, ParseMode};
use fusionlink::kb::{self, Annotation, CandidateMap, Entity, EntityStore};
use fusionlink::linker::{self, LinkConfig, LinkResult, Reader};
use fusionlink::nn;
use fusionlink::retriever::{self, RetrieverModel, VectorIndex};
use fusionlink::text;
use fusionlink::Error;

type Span = (usize, usize, String);

fn py_err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.name());
    if e.is_validation() {
        PyValueError::new_err(msg)
    } else {
        PyRuntimeError::new_err(msg)
    }
}

fn to_annotations(spans: Vec<Span>) -> Vec<Annotation> {
    spans
        .into_iter()
        .map(|(start, end, entity_id)| Annotation { start, end, entity_id })
        .collect()
}

fn to_spans(anns: &[Annotation]) -> Vec<Span> {
    anns.iter().map(|a| (a.start, a.end, a.entity_id.clone())).collect()
}

fn to_results(docs: BTreeMap<String, Vec<Span>>) -> Vec<LinkResult> {
    docs.into_iter()
        .map(|(id, spans)| LinkResult::new(&id, to_annotations(spans)))
        .collect()
}

/// Word-level vocabulary with reserved special tokens.
#[pyclass(name = "Tokenizer", module = "pyfusionlink")]
struct PyTokenizer {
    inner: text::Tokenizer,
}

#[pymethods]
impl PyTokenizer {
    #[new]
    #[pyo3(signature = (corpus, min_count = 1))]
    fn new(corpus: Vec<String>, min_count: usize) -> PyResult<Self> {
        let inner = text::Tokenizer::build(corpus.iter(), min_count).map_err(py_err)?;
        Ok(PyTokenizer { inner })
    }

    #[staticmethod]
    fn from_vocab(vocab: Vec<String>) -> PyResult<Self> {
        let inner = text::Tokenizer::from_vocab(vocab).map_err(py_err)?;
        Ok(PyTokenizer { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = text::Tokenizer::read_vocab(&path).map_err(py_err)?;
        Ok(PyTokenizer { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_vocab(&path).map_err(py_err)
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.decode(&ids)
    }

    fn id(&self, token: &str) -> usize {
        self.inner.id(token)
    }

    fn vocab(&self) -> Vec<String> {
        self.inner.vocab().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, token: &str) -> bool {
        self.inner.contains(token)
    }
}

/// Links whole documents with a trained retriever, index and reader.
#[pyclass(name = "Linker", module = "pyfusionlink")]
struct PyLinker {
    store: EntityStore,
    retriever: RetrieverModel,
    index: VectorIndex,
    reader: Reader,
    cfg: LinkConfig,
}

#[pymethods]
impl PyLinker {
    #[new]
    #[pyo3(signature = (entities, retriever_dir, index, reader_dir, window = 20, stride = 10, k = 100))]
    fn new(
        entities: PathBuf,
        retriever_dir: PathBuf,
        index: PathBuf,
        reader_dir: PathBuf,
        window: usize,
        stride: usize,
        k: usize,
    ) -> PyResult<Self> {
        Ok(PyLinker {
            store: kb::load_entities(&entities).map_err(py_err)?,
            retriever: RetrieverModel::load(&retriever_dir).map_err(py_err)?,
            index: VectorIndex::load(&index).map_err(py_err)?,
            reader: Reader::load(&reader_dir).map_err(py_err)?,
            cfg: LinkConfig { window, stride, k },
        })
    }

    fn link(&self, py: Python<'_>, doc_id: &str, text: &str) -> PyResult<Vec<Span>> {
        let res = py
            .detach(|| {
                linker::link_document(
                    doc_id,
                    text,
                    &self.store,
                    &self.retriever,
                    &self.index,
                    &self.reader,
                    &self.cfg,
                )
            })
            .map_err(py_err)?;
        Ok(to_spans(&res.annotations))
    }
}

/// Links single marked mentions against a candidate map.
#[pyclass(name = "Disambiguator", module = "pyfusionlink")]
struct PyDisambiguator {
    store: EntityStore,
    map: CandidateMap,
    reader: Reader,
}

#[pymethods]
impl PyDisambiguator {
    #[new]
    fn new(entities: PathBuf, candidates: PathBuf, reader_dir: PathBuf) -> PyResult<Self> {
        let store = kb::load_entities(&entities).map_err(py_err)?;
        let map = CandidateMap::load(&candidates, &store).map_err(py_err)?;
        let reader = Reader::load(&reader_dir).map_err(py_err)?;
        Ok(PyDisambiguator { store, map, reader })
    }

    /// Entity id for the mention at `[start, end)`, or `None` when the
    /// reader's output matches no candidate.
    fn disambiguate(&self, py: Python<'_>, text: &str, start: usize, end: usize) -> PyResult<Option<String>> {
        py.detach(|| linker::disambiguate(text, (start, end), &self.store, &self.map, &self.reader))
            .map_err(py_err)
    }
}

/// `(text, start, end)` for every token of `text`.
#[pyfunction]
fn split(text: &str) -> Vec<(String, usize, usize)> {
    text::split(text).into_iter().map(|t| (t.text, t.start, t.end)).collect()
}

#[pyfunction]
fn normalize_ws(s: &str) -> String {
    text::normalize_ws(s)
}

/// Token window around `[start, end)` with the mention wrapped in markers.
#[pyfunction]
#[pyo3(signature = (doc, start, end, budget = 128))]
fn mark_mention(doc: &str, start: usize, end: usize, budget: usize) -> PyResult<Vec<String>> {
    text::mark_mention(doc, start, end, budget).map_err(py_err)
}

#[pyfunction]
fn serialize_el(entities: Vec<(String, Vec<String>)>) -> PyResult<String> {
    let pred = ElPrediction::new(
        entities
            .into_iter()
            .map(|(title, mentions)| LinkedEntity { title, mentions })
            .collect(),
    )
    .map_err(py_err)?;
    Ok(grammar::serialize_el(&pred))
}

#[pyfunction]
#[pyo3(signature = (s, strict = true))]
fn parse_el(s: &str, strict: bool) -> PyResult<Vec<(String, Vec<String>)>> {
    let mode = if strict { ParseMode::Strict } else { ParseMode::Lenient };
    let pred = grammar::parse_el(s, mode).map_err(py_err)?;
    Ok(pred.entities().iter().map(|e| (e.title.clone(), e.mentions.clone())).collect())
}

#[pyfunction]
fn score(entity: Vec<f64>, passage: Vec<f64>) -> PyResult<f64> {
    retriever::score(&entity, &passage).map_err(py_err)
}

/// Contrastive loss from precomputed positive and negative scores.
#[pyfunction]
fn nce_loss(positives: Vec<f64>, negatives: Vec<f64>) -> PyResult<f64> {
    retriever::nce_from_scores(&positives, &negatives).map_err(py_err)
}

#[pyfunction]
fn linear_schedule(step: usize, total: usize, peak: f64, warmup: f64) -> f64 {
    nn::linear_schedule(step, total, peak, warmup)
}

#[pyfunction]
fn resolve_overlaps(spans: Vec<Span>) -> Vec<Span> {
    to_spans(&linker::resolve_overlaps(&to_annotations(spans)))
}

/// Micro precision, recall and F1 over `{doc_id: spans}` maps, counting only
/// gold links whose entity is in `in_kb`.
#[pyfunction]
fn micro_prf(
    pred: BTreeMap<String, Vec<Span>>,
    gold: BTreeMap<String, Vec<Span>>,
    in_kb: Vec<String>,
) -> PyResult<(f64, f64, f64)> {
    let store = EntityStore::from_entities(in_kb.into_iter().map(|id| Entity {
        title: id.clone(),
        id,
        description: String::new(),
    }))
    .map_err(py_err)?;
    let m = eval::micro_prf(&to_results(pred), &to_results(gold), &store).map_err(py_err)?;
    Ok((m.precision, m.recall, m.f1))
}

/// Largest relative gradient error of a small random reader and retriever.
#[pyfunction]
#[pyo3(signature = (d_model = 8, candidates = 2, vocab_size = 40, seed = 7, eps = 1e-4, per_param = 100))]
fn gradcheck(
    py: Python<'_>,
    d_model: usize,
    candidates: usize,
    vocab_size: usize,
    seed: u64,
    eps: f64,
    per_param: usize,
) -> PyResult<(f64, f64)> {
    let args = GradcheckArgs {
        d_model,
        candidates,
        vocab_size,
        seed,
        eps,
        per_param,
        tolerance: f64::INFINITY,
    };
    py.detach(|| cli::gradcheck_errors(&args)).map_err(py_err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("fusionlink".to_string()).chain(args).collect();
    py.detach(|| cli::run(argv))
}

#[pymodule]
fn pyfusionlink(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyLinker>()?;
    m.add_class::<PyDisambiguator>()?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_ws, m)?)?;
    m.add_function(wrap_pyfunction!(mark_mention, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_el, m)?)?;
    m.add_function(wrap_pyfunction!(parse_el, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(linear_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_overlaps, m)?)?;
    m.add_function(wrap_pyfunction!(micro_prf, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
