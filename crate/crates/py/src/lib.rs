//! Python bindings: corpus search, synthetic data, and training / answering
//! / tracing with the multi-step reader.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use murke::config::RunConfig;
use murke::harness::{build_vocab, chain_recovery_rate, prepare_questions};
use murke::reasoner::{self, Model, PreparedQuestion, ReasonOptions, TraceFile};
use murke::retrieval::retrieve_top_k;
use murke::synth::{generate_synthetic, load_chains, SynthConfig};
use murke::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NotFound(_) => PyKeyError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for murke::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "Config", module = "murke")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses flat `key = value` text; empty text gives the defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse(text).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).py()?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()?;
        self.inner.validate().py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.hyper.steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.hyper.seed
    }
}

#[pyclass(name = "Corpus", module = "murke")]
struct PyCorpus {
    inner: murke::corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: murke::corpus::Corpus::from_jsonl(text).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: murke::corpus::ingest_corpus(&path).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(title, text)` of one document.
    fn get(&self, doc_id: &str) -> PyResult<(String, String)> {
        let d = self.inner.get(doc_id).py()?;
        Ok((d.title.clone(), d.raw_text.clone()))
    }

    /// BM25 top-`k` as `(doc_id, score)` pairs.
    #[pyo3(signature = (query, k = 10))]
    fn search(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        let terms = murke::corpus::tokenize(query);
        retrieve_top_k(&terms, &self.inner, k, Default::default())
    }
}

/// Writes a synthetic corpus, dataset, splits and gold chains to `out_dir`
/// and returns `(questions, documents)`.
#[pyfunction]
#[pyo3(signature = (out_dir, n = 50, dev = 0, hops = 2, distractors = 5, answer_pool = 0, seed = 7))]
fn synth(
    out_dir: PathBuf,
    n: usize,
    dev: usize,
    hops: usize,
    distractors: usize,
    answer_pool: usize,
    seed: u64,
) -> PyResult<(usize, usize)> {
    let cfg = SynthConfig {
        n_questions: n,
        n_dev: dev,
        hops,
        distractors,
        answer_pool,
        seed,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg).py()?;
    data.write(&out_dir).py()?;
    Ok((data.questions.len(), data.documents.len()))
}

#[pyfunction]
fn points(right: usize, wrong: usize) -> i64 {
    reasoner::points(right, wrong)
}

#[pyclass(name = "Reasoner", module = "murke")]
struct PyReasoner {
    model: Model,
    config: RunConfig,
    losses: Vec<f64>,
}

impl PyReasoner {
    fn prepared(&self, corpus: &PyCorpus, dataset: &PathBuf) -> PyResult<Vec<PreparedQuestion>> {
        let questions = murke::dataset::load_dataset(dataset).py()?;
        let chains = self
            .config
            .chains
            .as_deref()
            .map(load_chains)
            .transpose()
            .py()?;
        prepare_questions(
            &corpus.inner,
            &questions,
            &self.model.vocab,
            chains.as_ref(),
            &self.config.pipeline(),
            None,
        )
        .py()
    }

    fn opts(&self) -> ReasonOptions {
        ReasonOptions::from_hyper(&self.config.hyper)
    }
}

#[pymethods]
impl PyReasoner {
    /// Trains on `train_path`. The vocabulary also covers `dev_path` when given.
    #[staticmethod]
    #[pyo3(signature = (config, corpus, train_path, dev_path = None))]
    fn train(
        py: Python<'_>,
        config: &PyConfig,
        corpus: &PyCorpus,
        train_path: PathBuf,
        dev_path: Option<PathBuf>,
    ) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let mut all = murke::dataset::load_dataset(&train_path).py()?;
        let train_len = all.len();
        if let Some(d) = &dev_path {
            all.extend(murke::dataset::load_dataset(d).py()?);
        }
        let vocab = build_vocab(&corpus.inner, &all);
        let chains = cfg.chains.as_deref().map(load_chains).transpose().py()?;
        py.detach(|| {
            let prepared = prepare_questions(
                &corpus.inner,
                &all[..train_len],
                &vocab,
                chains.as_ref(),
                &cfg.pipeline(),
                None,
            )?;
            let mut model = Model::new(vocab.clone(), cfg.dims, cfg.hyper.fusion, cfg.hyper.seed)?;
            let history = reasoner::train(&mut model, &prepared, None, &cfg.hyper)?;
            Ok(Self {
                model,
                losses: history.iter().map(|m| m.mean_loss).collect(),
                config: cfg,
            })
        })
        .py()
    }

    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn load(path: PathBuf, config: Option<&PyConfig>) -> PyResult<Self> {
        Ok(Self {
            model: Model::load(&path).py()?,
            config: config.map(|c| c.inner.clone()).unwrap_or_default(),
            losses: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).py()
    }

    /// Mean training loss per epoch.
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// `(accuracy, points, chain_recovery or None)` on a labelled dataset.
    fn evaluate(
        &self,
        py: Python<'_>,
        corpus: &PyCorpus,
        dataset: PathBuf,
    ) -> PyResult<(f64, i64, Option<f64>)> {
        let prepared = self.prepared(corpus, &dataset)?;
        let opts = self.opts();
        let (metrics, outputs) = py
            .detach(|| reasoner::evaluate(&self.model, &prepared, &opts))
            .py()?;
        let recovery = match self.config.chains.as_deref() {
            Some(p) => Some(chain_recovery_rate(&outputs, &load_chains(p).py()?).py()?),
            None => None,
        };
        Ok((metrics.accuracy, metrics.points, recovery))
    }

    /// `(index, option text)` predicted for one question.
    fn answer(&self, corpus: &PyCorpus, dataset: PathBuf, qid: &str) -> PyResult<(usize, String)> {
        let prepared = self.prepared(corpus, &dataset)?;
        let q = prepared
            .iter()
            .find(|q| q.qid == qid)
            .ok_or_else(|| PyKeyError::new_err(qid.to_string()))?;
        let o = self.model.reason(q, &self.opts()).py()?;
        Ok((o.predicted_index, q.options[o.predicted_index].clone()))
    }

    /// The reasoning trace of one question as a JSON string.
    fn trace(&self, corpus: &PyCorpus, dataset: PathBuf, qid: &str) -> PyResult<String> {
        let prepared = self.prepared(corpus, &dataset)?;
        let q = prepared
            .iter()
            .find(|q| q.qid == qid)
            .ok_or_else(|| PyKeyError::new_err(qid.to_string()))?;
        let o = self.model.reason(q, &self.opts()).py()?;
        TraceFile::build(&o, q).py()?.to_json().py()
    }
}

#[pymodule]
#[pyo3(name = "murke")]
fn murke_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyReasoner>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(points, m)?)?;
    Ok(())
}
