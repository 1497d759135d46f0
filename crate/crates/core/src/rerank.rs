//! Semantic relevance filter: a BiGRU cross-encoder reads
//! `[CLS] question [SEP] document [SEP]`, and the first position's state goes
//! through an affine head and a logistic squash.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::checkpoint;
use crate::neural::{BiGru, Grads, Graph, ParamId, ParamStore, Sgd, Tensor, Var};
use crate::vocab::{Vocab, CLS_ID, SEP_ID};

pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_MIN_KEEP: usize = 5;

/// Token ids laid out as `[CLS] q… [SEP] d… [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossInput {
    pub ids: Vec<usize>,
}

impl CrossInput {
    /// Question and document id segments, recovered from the separator positions.
    pub fn segments(&self) -> Option<(&[usize], &[usize])> {
        if self.ids.first() != Some(&CLS_ID) {
            return None;
        }
        let seps: Vec<usize> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == SEP_ID)
            .map(|(i, _)| i)
            .collect();
        match seps.as_slice() {
            [a, b] if *b == self.ids.len() - 1 => Some((&self.ids[1..*a], &self.ids[a + 1..*b])),
            _ => None,
        }
    }
}

pub fn build_cross_input(question: &[String], doc: &[String], vocab: &Vocab) -> CrossInput {
    let mut ids = Vec::with_capacity(question.len() + doc.len() + 3);
    ids.push(CLS_ID);
    ids.extend(vocab.encode(question));
    ids.push(SEP_ID);
    ids.extend(vocab.encode(doc));
    ids.push(SEP_ID);
    CrossInput { ids }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankerDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for RerankerDims {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RerankerModel {
    pub dims: RerankerDims,
    pub vocab: Vocab,
    pub store: ParamStore,
    embed: ParamId,
    encoder: BiGru,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Serialize, Deserialize)]
struct RerankerMeta {
    kind: String,
    dims: RerankerDims,
    vocab: Vocab,
}

impl RerankerModel {
    pub fn new(vocab: Vocab, dims: RerankerDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add_uniform("rerank.embed", vocab.len(), dims.embed_dim, 1, &mut rng);
        let encoder = BiGru::new(
            &mut store,
            "rerank.enc",
            dims.embed_dim,
            dims.hidden_dim,
            &mut rng,
        );
        let two_d = 2 * dims.hidden_dim;
        let head_w = store.add_uniform("rerank.head_w", two_d, 1, two_d, &mut rng);
        let head_b = store.add("rerank.head_b", Tensor::zeros(1, 1));
        Self {
            dims,
            vocab,
            store,
            embed,
            encoder,
            head_w,
            head_b,
        }
    }

    pub fn zero_head(&mut self) {
        *self.store.get_mut(self.head_w) = Tensor::zeros(2 * self.dims.hidden_dim, 1);
        *self.store.get_mut(self.head_b) = Tensor::zeros(1, 1);
    }

    fn logit(&self, g: &mut Graph, input: &CrossInput) -> Result<Var> {
        let x = g.embed(self.embed, &input.ids)?;
        let h = self.encoder.forward(g, x)?;
        let first = g.slice_rows(h, 0, 1)?;
        let w = g.param(self.head_w);
        let b = g.param(self.head_b);
        let z = g.matmul(first, w)?;
        g.add(z, b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = RerankerMeta {
            kind: "reranker".into(),
            dims: self.dims,
            vocab: self.vocab.clone(),
        };
        checkpoint::save(
            path,
            &self.store,
            serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (stored, header) = checkpoint::load(path)?;
        let meta: RerankerMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::Checkpoint(format!("reranker header: {e}")))?;
        if meta.kind != "reranker" {
            return Err(Error::Checkpoint(format!(
                "expected a reranker, found {}",
                meta.kind
            )));
        }
        let mut model = Self::new(meta.vocab, meta.dims, 0);
        checkpoint::restore_into(&mut model.store, &stored)?;
        Ok(model)
    }
}

/// Relevance in `(0, 1)`.
pub fn relevance_score(model: &RerankerModel, question: &[String], doc: &[String]) -> Result<f64> {
    let input = build_cross_input(question, doc, &model.vocab);
    let mut g = Graph::new(&model.store);
    let z = model.logit(&mut g, &input)?;
    Ok(crate::neural::graph::sigmoid(g.scalar(z)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FilterMode {
    /// Keep scores strictly above the threshold; fall back to the best `min_keep`.
    Threshold {
        threshold: f64,
        min_keep: usize,
    },
    TopN(usize),
}

impl Default for FilterMode {
    fn default() -> Self {
        FilterMode::Threshold {
            threshold: DEFAULT_THRESHOLD,
            min_keep: DEFAULT_MIN_KEEP,
        }
    }
}

/// Applies a filter to already-scored candidates. Output is ranked by score, ties by id.
pub fn filter_scored(
    mut scored: Vec<(String, f64)>,
    mode: FilterMode,
) -> Result<Vec<(String, f64)>> {
    crate::retrieval::sort_ranked(&mut scored);
    match mode {
        FilterMode::Threshold {
            threshold,
            min_keep,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::invalid(format!(
                    "threshold {threshold} outside [0, 1]"
                )));
            }
            let kept: Vec<_> = scored
                .iter()
                .filter(|(_, s)| *s > threshold)
                .cloned()
                .collect();
            if kept.is_empty() {
                scored.truncate(min_keep.max(1));
                Ok(scored)
            } else {
                Ok(kept)
            }
        }
        FilterMode::TopN(n) => {
            scored.truncate(n.max(1));
            Ok(scored)
        }
    }
}

/// Scores every candidate document against the question and filters.
pub fn filter_relevant<'a>(
    model: &RerankerModel,
    question: &[String],
    candidates: impl IntoIterator<Item = (&'a str, &'a [String])>,
    mode: FilterMode,
) -> Result<Vec<(String, f64)>> {
    let scored = candidates
        .into_iter()
        .map(|(id, toks)| relevance_score(model, question, toks).map(|s| (id.to_string(), s)))
        .collect::<Result<Vec<_>>>()?;
    filter_scored(scored, mode)
}

/// A labelled (question, document) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevancePair {
    pub question: Vec<String>,
    pub doc: Vec<String>,
    pub relevant: bool,
}

fn pair_loss(model: &RerankerModel, g: &mut Graph, pair: &RelevancePair) -> Result<Var> {
    let input = build_cross_input(&pair.question, &pair.doc, &model.vocab);
    let z = model.logit(g, &input)?;
    let zero = g.zeros(1, 1);
    let both = g.concat_cols(zero, z)?;
    // log_softmax([0, z]) = [log(1 − σ(z)), log σ(z)]
    let ls = g.log_softmax_rows(both)?;
    let picked = g.pick(ls, usize::from(pair.relevant))?;
    Ok(g.scale(picked, -1.0))
}

/// Mean binary cross-entropy over `pairs`.
pub fn mean_loss(model: &RerankerModel, pairs: &[RelevancePair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let mut g = Graph::new(&model.store);
        let l = pair_loss(model, &mut g, p)?;
        total += g.scalar(l);
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Loss of one pair and its gradient.
pub fn pair_gradient(model: &RerankerModel, pair: &RelevancePair) -> Result<(f64, Grads)> {
    let mut g = Graph::new(&model.store);
    let loss = pair_loss(model, &mut g, pair)?;
    let mut grads = model.store.zero_grads();
    g.backward(loss, &mut grads)?;
    Ok((g.scalar(loss), grads))
}

/// SGD on binary cross-entropy, one pair per update in a seeded shuffled order.
/// The returned curve holds the loss before training followed by the loss after each epoch.
pub fn train_reranker(
    model: &mut RerankerModel,
    pairs: &[RelevancePair],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty relevance dataset"));
    }
    if !pairs.iter().any(|p| p.relevant) || pairs.iter().all(|p| p.relevant) {
        return Err(Error::invalid(
            "relevance data needs positive and negative pairs",
        ));
    }
    let sgd = Sgd::new(lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = vec![mean_loss(model, pairs)?];
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (_, grads) = pair_gradient(model, &pairs[i])?;
            sgd.step(&mut model.store, &grads, epoch)?;
        }
        curve.push(mean_loss(model, pairs)?);
    }
    Ok(curve)
}
