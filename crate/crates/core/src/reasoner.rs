//! The iterative reader: `T` rounds of select → (reformulate ∥ entail), a
//! mean over the per-step option distributions, and the log-likelihood
//! objective used for training.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entailment::{entail_all, EntailmentParams};
use crate::error::{Error, Result};
use crate::neural::checkpoint;
use crate::neural::{clip_grad_norm, Grads, Graph, ParamId, ParamStore, Sgd, Tensor, Var};
use crate::reformulation::{extract_span, reformulate, ReformulationParams};
use crate::selection::{
    init_question_state, score_document, select_top1, FusionMode, FusionParams, QuestionState,
    SequenceEncoder,
};
use crate::vocab::{Vocab, UNK_ID};

pub const TOP_GAMMA: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Length of image vectors; 0 when questions carry none.
    pub image_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            hidden_dim: 200,
            image_dim: 0,
        }
    }
}

/// Training and inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    /// Reasoning steps `T`.
    pub steps: usize,
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    /// Relevance threshold of the semantic filter.
    pub th_r: f64,
    pub top_k: usize,
    pub key_terms: usize,
    pub fusion: FusionMode,
    pub seed: u64,
    /// Never select the same document twice for one question.
    pub exclude_previous: bool,
    /// Leading epochs trained with a single step before switching to `steps`.
    pub stage_one_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Weight of the chain-supervised selection term (used only where gold chains are known).
    pub selection_weight: f64,
    /// Feed the gold chain document to later steps during training.
    pub teacher_forcing: bool,
    pub freeze_embeddings: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            steps: 3,
            lr: 0.015,
            decay: 0.05,
            epochs: 50,
            th_r: 0.9,
            top_k: 100,
            key_terms: 8,
            fusion: FusionMode::None,
            seed: 0,
            exclude_previous: true,
            stage_one_epochs: 10,
            batch_size: 1,
            max_grad_norm: 5.0,
            selection_weight: 1.0,
            teacher_forcing: true,
            freeze_embeddings: false,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.decay >= 0.0) {
            return Err(Error::Config("lr and decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// A supporting document as token ids plus the tokens they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportDoc {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

/// A question with its supporting set, encoded against a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuestion {
    pub qid: String,
    pub category: String,
    pub text: String,
    pub q_ids: Vec<usize>,
    pub options: Vec<String>,
    pub option_ids: Vec<Vec<usize>>,
    pub answer_idx: Option<usize>,
    pub image: Option<Vec<f64>>,
    pub support: Vec<SupportDoc>,
    /// Gold reasoning chain, when known.
    pub chain: Option<Vec<String>>,
}

fn encode_or_unk(vocab: &Vocab, tokens: &[String]) -> Vec<usize> {
    if tokens.is_empty() {
        vec![UNK_ID]
    } else {
        vocab.encode(tokens)
    }
}

impl PreparedQuestion {
    pub fn new(
        question: &crate::dataset::Question,
        support: Vec<(String, Vec<String>)>,
        vocab: &Vocab,
        chain: Option<Vec<String>>,
    ) -> Self {
        Self {
            qid: question.qid.clone(),
            category: question.category.clone(),
            text: question.text.clone(),
            q_ids: encode_or_unk(vocab, &question.tokens),
            options: question.options.clone(),
            option_ids: question
                .option_tokens
                .iter()
                .map(|t| encode_or_unk(vocab, t))
                .collect(),
            answer_idx: question.answer_idx,
            image: question.image_vec.clone(),
            support: support
                .into_iter()
                .map(|(doc_id, tokens)| SupportDoc {
                    ids: encode_or_unk(vocab, &tokens),
                    doc_id,
                    tokens,
                })
                .collect(),
            chain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub doc_id: String,
    pub p_s: Vec<f64>,
    pub p_e: Vec<f64>,
    pub gamma: Vec<f64>,
    pub span: (usize, usize),
    pub choice_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerOutput {
    pub qid: String,
    pub traces: Vec<StepTrace>,
    pub final_scores: Vec<f64>,
    pub predicted_index: usize,
    /// Fewer steps ran than requested because every document had been read.
    pub truncated: bool,
}

/// Mean of the per-step option distributions.
pub fn aggregate_scores(step_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = step_scores
        .first()
        .ok_or_else(|| Error::invalid("no step scores to aggregate"))?;
    let mut out = vec![0.0; first.len()];
    for s in step_scores {
        if s.len() != out.len() {
            return Err(Error::invalid("step scores differ in length"));
        }
        for (o, x) in out.iter_mut().zip(s) {
            *o += x;
        }
    }
    let inv = 1.0 / step_scores.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// `−log(mean_t Score_gold)`, with the mean clamped away from zero.
pub fn loss(step_scores: &[Vec<f64>], gold: usize) -> Result<f64> {
    let agg = aggregate_scores(step_scores)?;
    let p = *agg
        .get(gold)
        .ok_or_else(|| Error::invalid(format!("gold index {gold} of {} options", agg.len())))?;
    Ok(-p.max(crate::neural::graph::LOG_FLOOR).ln())
}

/// Argmax; ties go to the lowest index.
pub fn predict(final_scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in final_scores.iter().enumerate() {
        if x > final_scores[best] {
            best = i;
        }
    }
    best
}

/// Graph form of [`aggregate_scores`] over `1 × h` rows.
pub fn aggregate_vars(g: &mut Graph, step_scores: &[Var]) -> Result<Var> {
    let stacked = g.concat_rows(step_scores)?;
    Ok(g.mean_rows(stacked))
}

pub fn loss_var(g: &mut Graph, final_scores: Var, gold: usize) -> Result<Var> {
    let p = g.pick(final_scores, gold)?;
    let lp = g.log(p);
    Ok(g.scale(lp, -1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    dims: ModelDims,
    fusion: FusionMode,
    vocab: Vocab,
}

/// Every trainable piece of the reader.
#[derive(Debug, Clone)]
pub struct Model {
    pub dims: ModelDims,
    pub fusion_mode: FusionMode,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub embed: ParamId,
    pub encoder: SequenceEncoder,
    pub fusion: Option<FusionParams>,
    pub reform: ReformulationParams,
    pub entail: EntailmentParams,
}

/// How a single question is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReasonOptions {
    pub steps: usize,
    pub exclude_previous: bool,
    /// Run reformulation and entailment of each step on separate threads.
    pub concurrent: bool,
}

impl ReasonOptions {
    pub fn from_hyper(h: &Hyper) -> Self {
        Self {
            steps: h.steps,
            exclude_previous: h.exclude_previous,
            concurrent: false,
        }
    }
}

struct StepVars {
    doc_index: usize,
    scores: Var,
    p_s: Var,
    p_e: Var,
    gamma: Var,
}

struct Forward {
    steps: Vec<StepVars>,
    final_scores: Var,
    selection_terms: Vec<Var>,
    truncated: bool,
}

impl Model {
    pub fn new(vocab: Vocab, dims: ModelDims, fusion_mode: FusionMode, seed: u64) -> Result<Self> {
        if fusion_mode != FusionMode::None && dims.image_dim == 0 {
            return Err(Error::Config(format!(
                "fusion mode {fusion_mode} needs image_dim > 0"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = dims.embed_dim;
        let d = dims.hidden_dim;
        let embed = store.add_uniform("embed", vocab.len(), e, 1, &mut rng);
        let encoder = SequenceEncoder::new(&mut store, "encoder", e, d, &mut rng);
        let fusion = (dims.image_dim > 0)
            .then(|| FusionParams::new(&mut store, dims.image_dim, d, &mut rng));
        let reform = ReformulationParams::new(&mut store, d, &mut rng);
        let entail = EntailmentParams::new(&mut store, e, d, &mut rng);
        Ok(Self {
            dims,
            fusion_mode,
            vocab,
            store,
            embed,
            encoder,
            fusion,
            reform,
            entail,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: "reasoner".into(),
            dims: self.dims,
            fusion: self.fusion_mode,
            vocab: self.vocab.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (stored, header) = checkpoint::load(path)?;
        let meta: ModelMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::Checkpoint(format!("reasoner header: {e}")))?;
        if meta.kind != "reasoner" {
            return Err(Error::Checkpoint(format!(
                "expected a reasoner, found {}",
                meta.kind
            )));
        }
        let mut model = Self::new(meta.vocab, meta.dims, meta.fusion, 0)?;
        checkpoint::restore_into(&mut model.store, &stored)?;
        Ok(model)
    }

    fn question_state(&self, g: &mut Graph, q: &PreparedQuestion) -> Result<QuestionState> {
        let e_q = self.encoder.encode(g, &q.q_ids, self.embed)?.out;
        let image = match (&q.image, self.fusion_mode) {
            (_, FusionMode::None) => None,
            (Some(v), _) => {
                if v.len() != self.dims.image_dim {
                    return Err(Error::invalid(format!(
                        "question {} has an image vector of length {}, expected {}",
                        q.qid,
                        v.len(),
                        self.dims.image_dim
                    )));
                }
                Some(g.constant_raw(1, v.len(), v.clone()))
            }
            (None, _) => None,
        };
        init_question_state(g, e_q, image, self.fusion_mode, self.fusion.as_ref())
    }

    fn encode_support(&self, g: &mut Graph, q: &PreparedQuestion) -> Result<Vec<Var>> {
        if q.support.is_empty() {
            return Err(Error::invalid(format!(
                "question {} has no supporting documents",
                q.qid
            )));
        }
        q.support
            .iter()
            .map(|d| Ok(self.encoder.encode(g, &d.ids, self.embed)?.out))
            .collect()
    }

    fn effective_steps(&self, q: &PreparedQuestion, opts: &ReasonOptions) -> Result<(usize, bool)> {
        if opts.steps == 0 {
            return Err(Error::invalid("at least one reasoning step is required"));
        }
        if opts.exclude_previous && opts.steps > q.support.len() {
            Ok((q.support.len(), true))
        } else {
            Ok((opts.steps, false))
        }
    }

    /// Builds the whole reasoning chain on one tape.
    ///
    /// With `supervise`, the gold chain adds a softmax selection term per step
    /// and, with `force`, steers later steps onto the gold documents.
    fn forward(
        &self,
        g: &mut Graph,
        q: &PreparedQuestion,
        opts: &ReasonOptions,
        supervise: bool,
        force: bool,
    ) -> Result<Forward> {
        let (steps, truncated) = self.effective_steps(q, opts)?;
        let mut state = self.question_state(g, q)?;
        let docs = self.encode_support(g, q)?;
        let mut exclude: HashSet<String> = HashSet::new();
        let mut out = Vec::with_capacity(steps);
        let mut selection_terms = Vec::new();
        for t in 0..steps {
            let doc_scores = docs
                .iter()
                .map(|&e_d| score_document(g, state.u, e_d))
                .collect::<Result<Vec<_>>>()?;
            let ranked: Vec<(&str, f64)> = q
                .support
                .iter()
                .zip(&doc_scores)
                .map(|(d, &s)| (d.doc_id.as_str(), g.scalar(s)))
                .collect();
            let mut chosen = select_top1(&ranked, &exclude)?;
            let gold = q
                .chain
                .as_ref()
                .and_then(|c| c.get(t))
                .and_then(|id| q.support.iter().position(|d| &d.doc_id == id))
                .filter(|&i| !exclude.contains(&q.support[i].doc_id));
            if supervise {
                if let Some(gi) = gold {
                    let open: Vec<usize> = (0..docs.len())
                        .filter(|&i| !exclude.contains(&q.support[i].doc_id))
                        .collect();
                    let parts: Vec<Var> = open.iter().map(|&i| doc_scores[i]).collect();
                    let col = g.concat_rows(&parts)?;
                    let row = g.transpose(col);
                    let lsm = g.log_softmax_rows(row)?;
                    let pos = open.iter().position(|&i| i == gi).expect("gold is open");
                    let lp = g.pick(lsm, pos)?;
                    selection_terms.push(g.scale(lp, -1.0));
                    if force {
                        chosen = gi;
                    }
                }
            }
            if opts.exclude_previous {
                exclude.insert(q.support[chosen].doc_id.clone());
            }
            let v = docs[chosen];
            let scores = entail_all(g, v, state.u, &q.option_ids, self.embed, &self.entail)?;
            let r = reformulate(g, &self.reform, state.u, v)?;
            out.push(StepVars {
                doc_index: chosen,
                scores,
                p_s: r.spans.p_s,
                p_e: r.spans.p_e,
                gamma: r.gamma,
            });
            state = QuestionState {
                u: r.u_next,
                step: state.step + 1,
            };
        }
        let rows: Vec<Var> = out.iter().map(|s| s.scores).collect();
        let final_scores = aggregate_vars(g, &rows)?;
        Ok(Forward {
            steps: out,
            final_scores,
            selection_terms,
            truncated,
        })
    }

    fn output_from(&self, g: &Graph, q: &PreparedQuestion, f: &Forward) -> ReasonerOutput {
        let traces = f
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let p_s = g.value(s.p_s).to_vec();
                let p_e = g.value(s.p_e).to_vec();
                StepTrace {
                    step: t,
                    doc_id: q.support[s.doc_index].doc_id.clone(),
                    span: extract_span(&p_s, &p_e),
                    p_s,
                    p_e,
                    gamma: g.value(s.gamma).to_vec(),
                    choice_scores: g.value(s.scores).to_vec(),
                }
            })
            .collect();
        let final_scores = g.value(f.final_scores).to_vec();
        ReasonerOutput {
            qid: q.qid.clone(),
            traces,
            predicted_index: predict(&final_scores),
            final_scores,
            truncated: f.truncated,
        }
    }

    /// Runs the reader on one question.
    pub fn reason(&self, q: &PreparedQuestion, opts: &ReasonOptions) -> Result<ReasonerOutput> {
        if opts.concurrent {
            return self.reason_concurrent(q, opts);
        }
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, q, opts, false, false)?;
        Ok(self.output_from(&g, q, &f))
    }

    /// Same computation as [`Model::reason`], with each step's reformulation and
    /// entailment on their own tapes and threads.
    fn reason_concurrent(
        &self,
        q: &PreparedQuestion,
        opts: &ReasonOptions,
    ) -> Result<ReasonerOutput> {
        let (steps, truncated) = self.effective_steps(q, opts)?;
        let (mut u, docs) = {
            let mut g = Graph::new(&self.store);
            let state = self.question_state(&mut g, q)?;
            let docs = self.encode_support(&mut g, q)?;
            (
                g.tensor(state.u),
                docs.iter().map(|&d| g.tensor(d)).collect::<Vec<_>>(),
            )
        };
        let mut exclude = HashSet::new();
        let mut traces = Vec::with_capacity(steps);
        let mut step_scores = Vec::with_capacity(steps);
        for t in 0..steps {
            let ranked: Vec<(&str, f64)> = {
                let mut g = Graph::new(&self.store);
                let uv = g.constant(&u);
                let mut out = Vec::with_capacity(docs.len());
                for (d, e_d) in q.support.iter().zip(&docs) {
                    let ev = g.constant(e_d);
                    let s = score_document(&mut g, uv, ev)?;
                    out.push((d.doc_id.as_str(), g.scalar(s)));
                }
                out
            };
            let chosen = select_top1(&ranked, &exclude)?;
            if opts.exclude_previous {
                exclude.insert(q.support[chosen].doc_id.clone());
            }
            let v = &docs[chosen];
            let (reformed, scores) = rayon::join(
                || -> Result<(Tensor, Vec<f64>, Vec<f64>, Vec<f64>)> {
                    let mut g = Graph::new(&self.store);
                    let uv = g.constant(&u);
                    let vv = g.constant(v);
                    let r = reformulate(&mut g, &self.reform, uv, vv)?;
                    Ok((
                        g.tensor(r.u_next),
                        g.value(r.spans.p_s).to_vec(),
                        g.value(r.spans.p_e).to_vec(),
                        g.value(r.gamma).to_vec(),
                    ))
                },
                || -> Result<Vec<f64>> {
                    let mut g = Graph::new(&self.store);
                    let uv = g.constant(&u);
                    let vv = g.constant(v);
                    let s = entail_all(&mut g, vv, uv, &q.option_ids, self.embed, &self.entail)?;
                    Ok(g.value(s).to_vec())
                },
            );
            let (u_next, p_s, p_e, gamma) = reformed?;
            let scores = scores?;
            traces.push(StepTrace {
                step: t,
                doc_id: q.support[chosen].doc_id.clone(),
                span: extract_span(&p_s, &p_e),
                p_s,
                p_e,
                gamma,
                choice_scores: scores.clone(),
            });
            step_scores.push(scores);
            u = u_next;
        }
        let final_scores = aggregate_scores(&step_scores)?;
        Ok(ReasonerOutput {
            qid: q.qid.clone(),
            traces,
            predicted_index: predict(&final_scores),
            final_scores,
            truncated,
        })
    }

    /// Training objective for one question and its gradient.
    pub fn loss_and_grads(
        &self,
        q: &PreparedQuestion,
        opts: &ReasonOptions,
        selection_weight: f64,
        teacher_forcing: bool,
    ) -> Result<(f64, Grads)> {
        let gold = q
            .answer_idx
            .ok_or_else(|| Error::invalid(format!("question {} has no gold answer", q.qid)))?;
        let mut g = Graph::new(&self.store);
        let supervise = selection_weight > 0.0 && q.chain.is_some();
        let f = self.forward(&mut g, q, opts, supervise, teacher_forcing)?;
        let mut total = loss_var(&mut g, f.final_scores, gold)?;
        if supervise && !f.selection_terms.is_empty() {
            let stacked = g.concat_rows(&f.selection_terms)?;
            let mean = g.mean_rows(stacked);
            let weighted = g.scale(mean, selection_weight);
            total = g.add(total, weighted)?;
        }
        let mut grads = self.store.zero_grads();
        g.backward(total, &mut grads)?;
        Ok((g.scalar(total), grads))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub n: usize,
    pub right: usize,
    pub accuracy: f64,
    pub points: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub right: usize,
    pub wrong: usize,
    pub accuracy: f64,
    pub points: i64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
}

/// Exam score: three points per right answer, minus one per wrong answer.
pub fn points(right: usize, wrong: usize) -> i64 {
    3 * right as i64 - wrong as i64
}

/// Accuracy and points from `(category, correct)` outcomes.
pub fn score_outcomes<'a>(outcomes: impl IntoIterator<Item = (&'a str, bool)>) -> Metrics {
    let mut m = Metrics::default();
    for (cat, ok) in outcomes {
        m.n += 1;
        let c = m.per_category.entry(cat.to_string()).or_default();
        c.n += 1;
        if ok {
            m.right += 1;
            c.right += 1;
        }
    }
    m.wrong = m.n - m.right;
    m.accuracy = if m.n == 0 {
        0.0
    } else {
        m.right as f64 / m.n as f64
    };
    m.points = points(m.right, m.wrong);
    for c in m.per_category.values_mut() {
        c.accuracy = c.right as f64 / c.n as f64;
        c.points = points(c.right, c.n - c.right);
    }
    m
}

/// Questions are answered in parallel; results keep input order.
pub fn evaluate(
    model: &Model,
    questions: &[PreparedQuestion],
    opts: &ReasonOptions,
) -> Result<(Metrics, Vec<ReasonerOutput>)> {
    if let Some(q) = questions.iter().find(|q| q.answer_idx.is_none()) {
        return Err(Error::invalid(format!(
            "question {} has no gold answer",
            q.qid
        )));
    }
    let outputs = questions
        .par_iter()
        .map(|q| model.reason(q, opts))
        .collect::<Result<Vec<_>>>()?;
    let metrics = score_outcomes(
        questions
            .iter()
            .zip(&outputs)
            .map(|(q, o)| (q.category.as_str(), Some(o.predicted_index) == q.answer_idx)),
    );
    Ok((metrics, outputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_accuracy: Option<f64>,
}

/// Minibatch SGD with the staged step schedule; deterministic for a fixed seed.
pub fn train(
    model: &mut Model,
    train_set: &[PreparedQuestion],
    dev_set: Option<&[PreparedQuestion]>,
    hyper: &Hyper,
) -> Result<Vec<EpochMetrics>> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(q) = train_set.iter().find(|q| q.answer_idx.is_none()) {
        return Err(Error::invalid(format!(
            "question {} has no gold answer",
            q.qid
        )));
    }
    model.store.set_frozen(model.embed, hyper.freeze_embeddings);
    let sgd = Sgd::new(hyper.lr, hyper.decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let steps = if epoch < hyper.stage_one_epochs {
            1
        } else {
            hyper.steps
        };
        let opts = ReasonOptions {
            steps,
            exclude_previous: hyper.exclude_previous,
            concurrent: false,
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    model.loss_and_grads(
                        &train_set[i],
                        &opts,
                        hyper.selection_weight,
                        hyper.teacher_forcing,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = model.store.zero_grads();
            for (l, g) in &results {
                total += l;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            clip_grad_norm(&mut grads, hyper.max_grad_norm);
            sgd.step(&mut model.store, &grads, epoch)?;
        }
        let dev_accuracy = match dev_set {
            Some(dev) if !dev.is_empty() => {
                let eval_opts = ReasonOptions::from_hyper(hyper);
                Some(evaluate(model, dev, &eval_opts)?.0.accuracy)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            steps,
            lr: sgd.lr_at(epoch),
            mean_loss: total / train_set.len() as f64,
            dev_accuracy,
        };
        info!(
            "epoch {} steps {} loss {:.4} dev {:?}",
            m.epoch, m.steps, m.mean_loss, m.dev_accuracy
        );
        history.push(m);
    }
    debug!("trained {} parameters", model.store.num_scalars());
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPosition {
    pub position: usize,
    pub token: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    #[serde(flatten)]
    pub trace: StepTrace,
    pub span_text: String,
    pub top_gamma: Vec<GammaPosition>,
}

/// On-disk trace of one answered question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub qid: String,
    pub question: String,
    pub options: Vec<String>,
    pub steps: Vec<TraceStep>,
    pub final_scores: Vec<f64>,
    pub predicted_index: usize,
    pub predicted_option: String,
    pub truncated: bool,
}

/// Indices of the `k` largest values, ties to the earlier position.
pub fn top_positions(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl TraceFile {
    pub fn build(output: &ReasonerOutput, q: &PreparedQuestion) -> Result<Self> {
        let steps = output
            .traces
            .iter()
            .map(|t| {
                let doc = q
                    .support
                    .iter()
                    .find(|d| d.doc_id == t.doc_id)
                    .ok_or_else(|| Error::NotFound(t.doc_id.clone()))?;
                let (s, e) = t.span;
                let span_text = doc
                    .tokens
                    .get(s..=e)
                    .map(|w| w.join(" "))
                    .unwrap_or_default();
                let top_gamma = top_positions(&t.gamma, TOP_GAMMA)
                    .into_iter()
                    .map(|i| GammaPosition {
                        position: i,
                        token: doc.tokens.get(i).cloned().unwrap_or_default(),
                        value: t.gamma[i],
                    })
                    .collect();
                Ok(TraceStep {
                    trace: t.clone(),
                    span_text,
                    top_gamma,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            qid: output.qid.clone(),
            question: q.text.clone(),
            options: q.options.clone(),
            steps,
            final_scores: output.final_scores.clone(),
            predicted_index: output.predicted_index,
            predicted_option: q
                .options
                .get(output.predicted_index)
                .cloned()
                .unwrap_or_default(),
            truncated: output.truncated,
        })
    }

    pub fn output(&self) -> ReasonerOutput {
        ReasonerOutput {
            qid: self.qid.clone(),
            traces: self.steps.iter().map(|s| s.trace.clone()).collect(),
            final_scores: self.final_scores.clone(),
            predicted_index: self.predicted_index,
            truncated: self.truncated,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }
}

pub fn export_trace(
    output: &ReasonerOutput,
    q: &PreparedQuestion,
    path: &Path,
) -> Result<TraceFile> {
    let file = TraceFile::build(output, q)?;
    let mut text = file.to_json()?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(file)
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        line: e.line(),
        message: e.to_string(),
    })
}
