//! End-to-end plumbing: per-question supporting sets, vocabulary, chain
//! recovery and the grid search over the number of reasoning steps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::dataset::Question;
use crate::error::{Error, Result};
use crate::reasoner::{
    evaluate, train, EpochMetrics, Hyper, Metrics, Model, ModelDims, PreparedQuestion,
    ReasonOptions, ReasonerOutput,
};
use crate::rerank::{filter_scored, relevance_score, FilterMode, RelevancePair, RerankerModel};
use crate::retrieval::{sort_ranked, Bm25Params, Retriever, Stoplist};
use crate::selection::FusionMode;
use crate::synth::{generate_synthetic, SynthConfig};
use crate::vocab::Vocab;

/// How the BM25 candidates are narrowed to the supporting set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RerankMode {
    /// Keep the BM25 union as ranked.
    #[default]
    None,
    Threshold,
    TopN,
}

impl fmt::Display for RerankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RerankMode::None => "none",
            RerankMode::Threshold => "threshold",
            RerankMode::TopN => "top-n",
        })
    }
}

impl FromStr for RerankMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RerankMode::None),
            "threshold" => Ok(RerankMode::Threshold),
            "top-n" => Ok(RerankMode::TopN),
            other => Err(Error::Config(format!("unknown rerank mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bm25: Bm25Params,
    pub top_k: usize,
    pub key_terms: usize,
    /// Upper bound on the supporting set after filtering.
    pub max_support: usize,
    pub rerank: RerankMode,
    pub threshold: f64,
    pub min_keep: usize,
    pub top_n: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bm25: Bm25Params::default(),
            top_k: crate::retrieval::DEFAULT_TOP_K,
            key_terms: crate::retrieval::DEFAULT_KEY_TERMS,
            max_support: 20,
            rerank: RerankMode::None,
            threshold: crate::rerank::DEFAULT_THRESHOLD,
            min_keep: crate::rerank::DEFAULT_MIN_KEEP,
            top_n: 10,
        }
    }
}

/// Ranked supporting documents for one question.
pub fn support_set(
    corpus: &Corpus,
    question: &Question,
    cfg: &PipelineConfig,
    stoplist: &Stoplist,
    reranker: Option<&RerankerModel>,
) -> Result<Vec<(String, f64)>> {
    let retriever = Retriever {
        corpus,
        params: cfg.bm25,
        top_k: cfg.top_k,
        key_terms: cfg.key_terms,
        stoplist: stoplist.clone(),
    };
    let mut ranked = retriever.report(question).union;
    if cfg.rerank != RerankMode::None {
        let model = reranker.ok_or_else(|| {
            Error::Config(format!(
                "rerank mode {} needs a reranker checkpoint",
                cfg.rerank
            ))
        })?;
        let scored = ranked
            .iter()
            .map(|(id, _)| {
                let doc = corpus.get(id)?;
                Ok((
                    id.clone(),
                    relevance_score(model, &question.tokens, &doc.tokens)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mode = match cfg.rerank {
            RerankMode::TopN => FilterMode::TopN(cfg.top_n),
            _ => FilterMode::Threshold {
                threshold: cfg.threshold,
                min_keep: cfg.min_keep,
            },
        };
        ranked = filter_scored(scored, mode)?;
    } else {
        sort_ranked(&mut ranked);
    }
    ranked.truncate(cfg.max_support.max(1));
    Ok(ranked)
}

/// Vocabulary over every corpus token plus question and option tokens.
pub fn build_vocab(corpus: &Corpus, questions: &[Question]) -> Vocab {
    let docs = corpus.documents().iter().flat_map(|d| d.tokens.iter());
    let qs = questions
        .iter()
        .flat_map(|q| q.tokens.iter().chain(q.option_tokens.iter().flatten()));
    Vocab::build(docs.chain(qs))
}

/// Runs retrieval for every question and encodes the result against `vocab`.
pub fn prepare_questions(
    corpus: &Corpus,
    questions: &[Question],
    vocab: &Vocab,
    chains: Option<&BTreeMap<String, Vec<String>>>,
    cfg: &PipelineConfig,
    reranker: Option<&RerankerModel>,
) -> Result<Vec<PreparedQuestion>> {
    let stoplist = Stoplist::english();
    questions
        .par_iter()
        .map(|q| {
            let ranked = support_set(corpus, q, cfg, &stoplist, reranker)?;
            if ranked.is_empty() {
                return Err(Error::invalid(format!(
                    "no supporting documents for {}",
                    q.qid
                )));
            }
            let support = ranked
                .into_iter()
                .map(|(id, _)| Ok((id.clone(), corpus.get(&id)?.tokens.clone())))
                .collect::<Result<Vec<_>>>()?;
            let chain = chains.and_then(|c| c.get(&q.qid)).cloned();
            Ok(PreparedQuestion::new(q, support, vocab, chain))
        })
        .collect()
}

/// Labelled pairs for the semantic filter: gold chain documents are relevant,
/// the rest of each supporting set is not.
pub fn relevance_pairs(
    corpus: &Corpus,
    prepared: &[PreparedQuestion],
    questions: &[Question],
) -> Result<Vec<RelevancePair>> {
    let mut out = Vec::new();
    for (p, q) in prepared.iter().zip(questions) {
        let Some(chain) = &p.chain else { continue };
        for d in &p.support {
            out.push(RelevancePair {
                question: q.tokens.clone(),
                doc: corpus.get(&d.doc_id)?.tokens.clone(),
                relevant: chain.contains(&d.doc_id),
            });
        }
    }
    Ok(out)
}

/// Fraction of questions whose selected documents, in order, equal the gold chain.
pub fn chain_recovery_rate(
    outputs: &[ReasonerOutput],
    chains: &BTreeMap<String, Vec<String>>,
) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::invalid("no traces to score"));
    }
    let mut hits = 0;
    for o in outputs {
        let gold = chains
            .get(&o.qid)
            .ok_or_else(|| Error::NotFound(format!("no gold chain for question {}", o.qid)))?;
        let picked: Vec<&String> = o.traces.iter().map(|t| &t.doc_id).collect();
        if picked.len() == gold.len() && picked.iter().zip(gold).all(|(a, b)| *a == b) {
            hits += 1;
        }
    }
    Ok(hits as f64 / outputs.len() as f64)
}

/// Training history, dev metrics and traces of one fitted model.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochMetrics>,
    pub metrics: Metrics,
    pub outputs: Vec<ReasonerOutput>,
    pub chain_recovery: Option<f64>,
}

pub fn fit_and_evaluate(
    model: &mut Model,
    train_set: &[PreparedQuestion],
    dev_set: &[PreparedQuestion],
    hyper: &Hyper,
) -> Result<FitReport> {
    let history = train(model, train_set, None, hyper)?;
    let (metrics, outputs) = evaluate(model, dev_set, &ReasonOptions::from_hyper(hyper))?;
    let chains: BTreeMap<String, Vec<String>> = dev_set
        .iter()
        .filter_map(|q| q.chain.clone().map(|c| (q.qid.clone(), c)))
        .collect();
    let chain_recovery = if chains.len() == dev_set.len() && !dev_set.is_empty() {
        Some(chain_recovery_rate(&outputs, &chains)?)
    } else {
        None
    };
    Ok(FitReport {
        history,
        metrics,
        outputs,
        chain_recovery,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub steps: usize,
    pub dev_accuracy: f64,
}

/// Trains one fresh model per step count (all from the same seed) and reports dev accuracy.
pub fn grid_search_t<F>(
    make_model: F,
    train_set: &[PreparedQuestion],
    dev_set: &[PreparedQuestion],
    hyper: &Hyper,
    steps: std::ops::RangeInclusive<usize>,
) -> Result<Vec<GridRow>>
where
    F: Fn() -> Result<Model> + Sync,
{
    if steps.is_empty() || *steps.start() == 0 {
        return Err(Error::Config(
            "step range must be non-empty and start at 1 or more".into(),
        ));
    }
    let values: Vec<usize> = steps.collect();
    values
        .par_iter()
        .map(|&t| {
            let mut model = make_model()?;
            let h = Hyper {
                steps: t,
                ..hyper.clone()
            };
            let report = fit_and_evaluate(&mut model, train_set, dev_set, &h)?;
            Ok(GridRow {
                steps: t,
                dev_accuracy: report.metrics.accuracy,
            })
        })
        .collect()
}

pub fn format_grid(rows: &[GridRow]) -> String {
    let mut s = String::from("T\tdev_accuracy\n");
    for r in rows {
        s.push_str(&format!("{}\t{:.4}\n", r.steps, r.dev_accuracy));
    }
    s
}

/// One arm of the step-count comparison on synthetic chains.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepSetup {
    pub n_train: usize,
    pub n_dev: usize,
    pub distractors: usize,
    pub answer_pool: usize,
    pub dims: ModelDims,
    pub pipeline: PipelineConfig,
    pub hyper: Hyper,
}

impl Default for MultiStepSetup {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_dev: 50,
            distractors: 5,
            // a shared answer vocabulary, so the reader must match option
            // words against the premise instead of memorising pairs
            answer_pool: 12,
            dims: ModelDims {
                embed_dim: 24,
                hidden_dim: 16,
                image_dim: 0,
            },
            // every gold chain document survives retrieval at these settings
            pipeline: PipelineConfig {
                top_k: 16,
                max_support: 30,
                ..PipelineConfig::default()
            },
            hyper: Hyper {
                lr: 0.3,
                epochs: 60,
                stage_one_epochs: 4,
                freeze_embeddings: true,
                ..Hyper::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiStepResult {
    pub seed: u64,
    pub one_step_accuracy: f64,
    pub two_step_accuracy: f64,
    pub two_step_chain_recovery: f64,
}

impl MultiStepResult {
    pub fn passes(&self) -> bool {
        self.two_step_accuracy >= 0.8
            && self.two_step_accuracy - self.one_step_accuracy >= 0.1
            && self.two_step_chain_recovery >= 0.6
    }
}

/// Generates a 2-hop benchmark from `seed`, then trains and scores a one-step
/// and a two-step reader on it under identical settings.
pub fn multi_step_experiment(setup: &MultiStepSetup, seed: u64) -> Result<MultiStepResult> {
    let data = generate_synthetic(&SynthConfig {
        n_questions: setup.n_train + setup.n_dev,
        n_dev: setup.n_dev,
        hops: 2,
        distractors: setup.distractors,
        answer_pool: setup.answer_pool,
        seed,
        ..SynthConfig::default()
    })?;
    let corpus = data.corpus()?;
    let questions = data.parsed_questions()?;
    let vocab = build_vocab(&corpus, &questions);
    let chains = data.chain_map();
    let prepared = prepare_questions(
        &corpus,
        &questions,
        &vocab,
        Some(&chains),
        &setup.pipeline,
        None,
    )?;
    let (train_set, dev_set) = prepared.split_at(setup.n_train);
    let arm = |steps: usize| -> Result<FitReport> {
        let mut model = Model::new(vocab.clone(), setup.dims, FusionMode::None, seed)?;
        let hyper = Hyper {
            steps,
            seed,
            ..setup.hyper.clone()
        };
        fit_and_evaluate(&mut model, train_set, dev_set, &hyper)
    };
    let (one, two) = rayon::join(|| arm(1), || arm(2));
    let (one, two) = (one?, two?);
    Ok(MultiStepResult {
        seed,
        one_step_accuracy: one.metrics.accuracy,
        two_step_accuracy: two.metrics.accuracy,
        two_step_chain_recovery: two
            .chain_recovery
            .ok_or_else(|| Error::invalid("dev questions lack gold chains"))?,
    })
}
