//! Document store: tokenisation, JSONL ingestion and term statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    /// Title tokens followed by body tokens.
    pub tokens: Vec<String>,
    pub raw_text: String,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        let title = title.into();
        let raw_text = text.into();
        let mut tokens = tokenize(&title);
        tokens.extend(tokenize(&raw_text));
        Self {
            doc_id: doc_id.into(),
            title,
            tokens,
            raw_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub avg_doc_len: f64,
    pub doc_freq: BTreeMap<String, usize>,
    pub total_terms: usize,
}

impl CorpusStats {
    pub fn df(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

#[derive(Debug, Deserialize)]
struct CorpusLine {
    id: String,
    title: String,
    text: String,
}

/// Read-only, indexed corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
    term_freqs: Vec<HashMap<String, u32>>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    stats: CorpusStats,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.tokens.is_empty() {
                return Err(Error::Malformed {
                    line: i + 1,
                    message: format!("document {} has no tokens", d.doc_id),
                });
            }
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::DuplicateDoc {
                    line: i + 1,
                    id: d.doc_id.clone(),
                });
            }
        }
        if docs.is_empty() {
            return Err(Error::invalid("corpus has no documents"));
        }

        let term_freqs: Vec<HashMap<String, u32>> = docs
            .iter()
            .map(|d| {
                let mut tf = HashMap::new();
                for t in &d.tokens {
                    *tf.entry(t.clone()).or_insert(0) += 1;
                }
                tf
            })
            .collect();

        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_freq = BTreeMap::new();
        for (i, tf) in term_freqs.iter().enumerate() {
            for (term, &count) in tf {
                postings.entry(term.clone()).or_default().push((i, count));
                *doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
        }
        let total_terms: usize = docs.iter().map(|d| d.tokens.len()).sum();
        let stats = CorpusStats {
            doc_count: docs.len(),
            avg_doc_len: total_terms as f64 / docs.len() as f64,
            doc_freq,
            total_terms,
        };
        Ok(Self {
            docs,
            by_id,
            term_freqs,
            postings,
            stats,
        })
    }

    /// Parses JSONL text with one `{"id", "title", "text"}` object per line.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut docs = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusLine = serde_json::from_str(line).map_err(|e| Error::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
            if seen.insert(rec.id.clone(), lineno).is_some() {
                return Err(Error::DuplicateDoc {
                    line: lineno,
                    id: rec.id,
                });
            }
            let doc = Document::new(rec.id, rec.title, rec.text);
            if doc.tokens.is_empty() {
                return Err(Error::Malformed {
                    line: lineno,
                    message: format!("document {} has no tokens", doc.doc_id),
                });
            }
            docs.push(doc);
        }
        Self::from_documents(docs)
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Result<&Document> {
        self.index_of(doc_id).map(|i| &self.docs[i])
    }

    pub fn index_of(&self, doc_id: &str) -> Result<usize> {
        self.by_id
            .get(doc_id)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("document {doc_id}")))
    }

    pub(crate) fn doc_at(&self, idx: usize) -> &Document {
        &self.docs[idx]
    }

    pub(crate) fn term_freq(&self, idx: usize, term: &str) -> u32 {
        self.term_freqs[idx].get(term).copied().unwrap_or(0)
    }

    pub(crate) fn postings(&self, term: &str) -> &[(usize, u32)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }
}

pub fn ingest_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_jsonl(&text)
}

pub fn get_document<'c>(corpus: &'c Corpus, doc_id: &str) -> Result<&'c Document> {
    corpus.get(doc_id)
}
