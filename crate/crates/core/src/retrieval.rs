//! Token-level candidate generation: key-term selection and BM25 ranking.
//!
//! ```text
//! score(D, Q) = Σ_{t ∈ set(Q)} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|D|/avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusStats};
use crate::dataset::Question;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_KEY_TERMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

const ENGLISH_STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "me",
    "more",
    "most",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stoplist(HashSet<String>);

impl Default for Stoplist {
    fn default() -> Self {
        Self::english()
    }
}

impl Stoplist {
    pub fn english() -> Self {
        Self(ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        ))
    }

    pub fn contains(&self, term: &str) -> bool {
        self.0.contains(term)
    }
}

/// Non-stopword terms ranked by IDF (rarest first), first occurrence breaking ties.
pub fn select_key_terms(
    tokens: &[String],
    stats: &CorpusStats,
    k: usize,
    stoplist: &Stoplist,
) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut terms: Vec<(usize, &String)> = tokens
        .iter()
        .filter(|t| !stoplist.contains(t))
        .filter(|t| seen.insert(t.as_str()))
        .enumerate()
        .collect();
    terms.sort_by(|a, b| {
        stats
            .idf(b.1)
            .total_cmp(&stats.idf(a.1))
            .then(a.0.cmp(&b.0))
    });
    terms
        .into_iter()
        .take(k.max(1))
        .map(|(_, t)| t.clone())
        .collect()
}

/// One query per option: question key terms followed by that option's key terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<Vec<String>>,
}

pub fn form_queries(
    question: &Question,
    stats: &CorpusStats,
    k: usize,
    stoplist: &Stoplist,
) -> QuerySet {
    let q_terms = select_key_terms(&question.tokens, stats, k, stoplist);
    let queries = question
        .option_tokens
        .iter()
        .map(|opt| {
            let mut q = q_terms.clone();
            q.extend(select_key_terms(opt, stats, k, stoplist));
            q
        })
        .collect();
    QuerySet { queries }
}

fn unique_terms(query: &[String]) -> Vec<&str> {
    let mut seen = HashSet::new();
    query
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

fn term_weight(idf: f64, tf: f64, doc_len: f64, avg_len: f64, p: Bm25Params) -> f64 {
    idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * doc_len / avg_len))
}

fn score_index(query: &[&str], idx: usize, corpus: &Corpus, p: Bm25Params) -> f64 {
    let stats = corpus.stats();
    let doc_len = corpus.doc_at(idx).tokens.len() as f64;
    query
        .iter()
        .map(|t| {
            let tf = corpus.term_freq(idx, t);
            if tf == 0 {
                0.0
            } else {
                term_weight(stats.idf(t), tf as f64, doc_len, stats.avg_doc_len, p)
            }
        })
        .sum()
}

pub fn bm25_score(query: &[String], doc_id: &str, corpus: &Corpus, p: Bm25Params) -> Result<f64> {
    let idx = corpus.index_of(doc_id)?;
    Ok(score_index(&unique_terms(query), idx, corpus, p))
}

/// Best `k` documents with positive score; ties by ascending doc id.
pub fn retrieve_top_k(
    query: &[String],
    corpus: &Corpus,
    k: usize,
    p: Bm25Params,
) -> Vec<(String, f64)> {
    let terms = unique_terms(query);
    let mut candidates: Vec<usize> = terms
        .iter()
        .flat_map(|t| corpus.postings(t).iter().map(|&(i, _)| i))
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    let mut scored: Vec<(String, f64)> = candidates
        .into_iter()
        .map(|i| {
            (
                corpus.doc_at(i).doc_id.clone(),
                score_index(&terms, i, corpus, p),
            )
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    sort_ranked(&mut scored);
    scored.truncate(k);
    scored
}

pub(crate) fn sort_ranked(v: &mut [(String, f64)]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Union of per-query top-`k` lists, keeping the best score seen for each id.
pub fn union_candidates(
    qs: &QuerySet,
    corpus: &Corpus,
    k: usize,
    p: Bm25Params,
) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for q in &qs.queries {
        for (id, s) in retrieve_top_k(q, corpus, k, p) {
            let e = out.entry(id).or_insert(s);
            if s > *e {
                *e = s;
            }
        }
    }
    out
}

/// Everything token-level retrieval produced for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub qid: String,
    pub queries: Vec<Vec<String>>,
    pub per_query: Vec<Vec<(String, f64)>>,
    /// Candidate ids with their best per-query score, ranked.
    pub union: Vec<(String, f64)>,
}

pub struct Retriever<'c> {
    pub corpus: &'c Corpus,
    pub params: Bm25Params,
    pub top_k: usize,
    pub key_terms: usize,
    pub stoplist: Stoplist,
}

impl<'c> Retriever<'c> {
    pub fn new(corpus: &'c Corpus) -> Self {
        Self {
            corpus,
            params: Bm25Params::default(),
            top_k: DEFAULT_TOP_K,
            key_terms: DEFAULT_KEY_TERMS,
            stoplist: Stoplist::english(),
        }
    }

    pub fn report(&self, question: &Question) -> RetrievalReport {
        let qs = form_queries(
            question,
            self.corpus.stats(),
            self.key_terms,
            &self.stoplist,
        );
        let per_query = qs
            .queries
            .iter()
            .map(|q| retrieve_top_k(q, self.corpus, self.top_k, self.params))
            .collect();
        let mut union: Vec<(String, f64)> =
            union_candidates(&qs, self.corpus, self.top_k, self.params)
                .into_iter()
                .collect();
        sort_ranked(&mut union);
        RetrievalReport {
            qid: question.qid.clone(),
            queries: qs.queries,
            per_query,
            union,
        }
    }
}
