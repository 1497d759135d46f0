use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Tensor;

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;

/// Token ↔ id table with reserved ids for unknown, classifier and separator marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from every token yielded, ordered lexicographically after the reserved marks.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let uniq: BTreeSet<&String> = tokens.into_iter().collect();
        let mut all = vec![UNK.to_string(), CLS.to_string(), SEP.to_string()];
        all.extend(
            uniq.into_iter()
                .filter(|t| ![UNK, CLS, SEP].contains(&t.as_str()))
                .cloned(),
        );
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Overwrites rows of `table` from a whitespace-separated text file
/// (`token v1 v2 ... ve` per line). Returns how many rows were set.
pub fn load_text_embeddings(path: &Path, vocab: &Vocab, table: &mut Tensor) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = table.cols();
    let mut loaded = 0;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed {
                line: i + 1,
                message: format!("bad embedding value: {e}"),
            })?;
        if values.len() != dim {
            // word2vec text files start with a "count dim" line
            if i == 0 && values.len() == 1 {
                continue;
            }
            return Err(Error::Malformed {
                line: i + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(&id) = vocab.index.get(tok) {
            let cols = table.cols();
            table.data_mut()[id * cols..(id + 1) * cols].copy_from_slice(&values);
            loaded += 1;
        }
    }
    Ok(loaded)
}
