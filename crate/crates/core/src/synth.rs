//! Seeded generator of multi-hop multiple-choice questions.
//!
//! Each question names a start entity `A` and a context term `C`. The gold
//! chain is `A → B` in one document and `B → answer` in another, so the bridge
//! `B` never appears in the question. The last hop and the distractors all
//! mention `C`, the distractors together with the wrong options or unrelated
//! entities, so only the bridge tells the answer document apart.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document};
use crate::dataset::{Question, QuestionRecord, CATEGORIES};
use crate::error::{Error, Result};
use crate::retrieval::{select_key_terms, Stoplist};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SYLLABLES_PER_NAME: u32 = 3;

const QUESTION_TEMPLATES: &[&str] = &[
    "what does {a} ultimately yield in the {c} pathway",
    "which product is finally formed from {a} within the {c} pathway",
    "in the {c} pathway what is the end product of {a}",
];
const FIRST_HOP: &[&str] = &[
    "{a} is converted into {b} by hepatic enzymes",
    "{a} is metabolised to {b} in the liver",
    "enzymes of the liver transform {a} into {b}",
];
const LATER_HOP: &[&str] = &[
    "{a} is converted into {b} during later reactions",
    "{a} is further processed into {b}",
    "over time {a} breaks down into {b}",
];
const FINAL_HOP: &[&str] = &[
    "in the {c} cascade {a} is converted into {b}",
    "{a} is further processed into {b} by the {c} cascade",
    "the {c} cascade breaks {a} down into {b}",
];
const TRAP: &[&str] = &[
    "the {c} cascade produces {x}",
    "{x} is released by the {c} cascade",
    "in the {c} cascade {x} accumulates",
];
const FILLER: &[&str] = &[
    "the {c} cascade is regulated by {x}",
    "{x} inhibits the {c} cascade",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_questions: usize,
    /// Trailing questions written to the dev split.
    pub n_dev: usize,
    pub hops: usize,
    /// Size of the pool of distinct entity names.
    pub vocab_size: usize,
    pub distractors: usize,
    pub options: usize,
    /// When non-zero, answers and wrong options come from a shared pool of
    /// this many names instead of being unique to each question.
    pub answer_pool: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_questions: 50,
            n_dev: 0,
            hops: 2,
            vocab_size: 20_000,
            distractors: 5,
            options: 4,
            answer_pool: 0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Entity names consumed by one question.
    pub fn names_per_question(&self) -> usize {
        let wrong = self.options - 1;
        let fillers = self.distractors.saturating_sub(wrong);
        (self.hops + 1) + 1 + wrong + fillers
    }

    fn validate(&self) -> Result<()> {
        if self.hops < 2 {
            return Err(Error::Config(format!(
                "hops must be at least 2, got {}",
                self.hops
            )));
        }
        if self.options < 2 {
            return Err(Error::Config("at least two options are required".into()));
        }
        if self.answer_pool != 0 && self.answer_pool < self.options {
            return Err(Error::Config(format!(
                "answer_pool {} is smaller than the option count {}",
                self.answer_pool, self.options
            )));
        }
        if self.n_dev > self.n_questions {
            return Err(Error::Config("n_dev exceeds n_questions".into()));
        }
        let capacity = (CONSONANTS.len() * VOWELS.len()).pow(SYLLABLES_PER_NAME);
        let needed = self.n_questions * self.names_per_question() + self.answer_pool;
        if self.vocab_size < needed || self.vocab_size > capacity {
            return Err(Error::Config(format!(
                "vocab_size {} cannot supply {needed} unique names (pool capacity {capacity})",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub qid: String,
    pub chain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub documents: Vec<Document>,
    pub questions: Vec<QuestionRecord>,
    pub chains: Vec<ChainRecord>,
    pub n_dev: usize,
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

fn name_pool<R: Rng>(size: usize, rng: &mut R) -> Vec<String> {
    let mut seen = HashSet::with_capacity(size);
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let mut name = String::with_capacity(6);
        for _ in 0..SYLLABLES_PER_NAME {
            name.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            name.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = name_pool(cfg.vocab_size, &mut rng);
    let mut names = pool.iter();
    let mut next = || names.next().expect("pool size validated").clone();

    struct Draft {
        chain: Vec<String>,
        context: String,
    }
    let answers: Vec<String> = (0..cfg.answer_pool).map(|_| next()).collect();
    let mut drafts: Vec<Draft> = (0..cfg.n_questions)
        .map(|_| Draft {
            chain: (0..=cfg.hops).map(|_| next()).collect(),
            context: next(),
        })
        .collect();
    if !answers.is_empty() {
        for d in &mut drafts {
            d.chain[cfg.hops] = answers.choose(&mut rng).expect("pool").clone();
        }
    }

    // Wrong options are answers of other questions in the same split, so an
    // option's identity alone says nothing about whether it is correct.
    let split_of = |qi: usize| usize::from(qi >= cfg.n_questions - cfg.n_dev);
    let mut wrong_options: Vec<Vec<String>> = Vec::with_capacity(cfg.n_questions);
    for qi in 0..cfg.n_questions {
        if !answers.is_empty() {
            let answer = &drafts[qi].chain[cfg.hops];
            let others: Vec<&String> = answers.iter().filter(|a| *a != answer).collect();
            wrong_options.push(
                others
                    .choose_multiple(&mut rng, cfg.options - 1)
                    .map(|a| (*a).clone())
                    .collect(),
            );
            continue;
        }
        let peers: Vec<usize> = (0..cfg.n_questions)
            .filter(|&j| j != qi && split_of(j) == split_of(qi))
            .collect();
        let wrong: Vec<String> = if peers.len() >= cfg.options - 1 {
            peers
                .choose_multiple(&mut rng, cfg.options - 1)
                .map(|&j| drafts[j].chain[cfg.hops].clone())
                .collect()
        } else {
            (0..cfg.options - 1).map(|_| next()).collect()
        };
        wrong_options.push(wrong);
    }

    // (question index, role, text) with role = Some(hop) for chain documents
    let mut raw_docs: Vec<(usize, Option<usize>, String)> = Vec::new();
    let mut questions = Vec::with_capacity(cfg.n_questions);
    for (qi, (draft, wrong)) in drafts.iter().zip(&wrong_options).enumerate() {
        let chain_ents = &draft.chain;
        let context = &draft.context;
        let answer = chain_ents[cfg.hops].clone();

        for hop in 0..cfg.hops {
            let pool = match hop {
                0 => FIRST_HOP,
                h if h + 1 == cfg.hops => FINAL_HOP,
                _ => LATER_HOP,
            };
            let t = pool.choose(&mut rng).expect("templates");
            let text = fill(
                t,
                &[
                    ("a", &chain_ents[hop]),
                    ("b", &chain_ents[hop + 1]),
                    ("c", context),
                ],
            );
            raw_docs.push((qi, Some(hop), text));
        }
        for k in 0..cfg.distractors {
            let (pool, x) = match wrong.get(k) {
                Some(w) => (TRAP, w.clone()),
                None => (FILLER, next()),
            };
            let t = pool.choose(&mut rng).expect("templates");
            raw_docs.push((qi, None, fill(t, &[("c", context), ("x", &x)])));
        }

        let mut options: Vec<String> = wrong.clone();
        options.push(answer.clone());
        options.shuffle(&mut rng);
        let answer_idx = options
            .iter()
            .position(|o| *o == answer)
            .expect("answer present");
        let qt = QUESTION_TEMPLATES.choose(&mut rng).expect("templates");
        questions.push(QuestionRecord {
            qid: format!("q{qi:04}"),
            category: CATEGORIES[qi % CATEGORIES.len()].to_string(),
            question: fill(qt, &[("a", &chain_ents[0]), ("c", context)]),
            options,
            answer_idx: Some(answer_idx),
            image_vec: None,
        });
    }

    // neutral ids: corpus order and ids carry no hint of the chain
    raw_docs.shuffle(&mut rng);
    let mut chains: Vec<Vec<(usize, String)>> = vec![Vec::new(); cfg.n_questions];
    let documents = raw_docs
        .into_iter()
        .enumerate()
        .map(|(i, (qi, role, text))| {
            let id = format!("d{i:05}");
            if let Some(hop) = role {
                chains[qi].push((hop, id.clone()));
            }
            Document::new(id, "", text)
        })
        .collect();
    let chains = chains
        .into_iter()
        .enumerate()
        .map(|(qi, mut c)| {
            c.sort();
            ChainRecord {
                qid: format!("q{qi:04}"),
                chain: c.into_iter().map(|(_, id)| id).collect(),
            }
        })
        .collect();
    Ok(SynthData {
        documents,
        questions,
        chains,
        n_dev: cfg.n_dev,
    })
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item).expect("serialisable"));
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct DocLine<'a> {
    id: &'a str,
    title: &'a str,
    text: &'a str,
}

impl SynthData {
    pub fn corpus_jsonl(&self) -> String {
        jsonl(self.documents.iter().map(|d| DocLine {
            id: &d.doc_id,
            title: &d.title,
            text: &d.raw_text,
        }))
    }

    pub fn train_records(&self) -> &[QuestionRecord] {
        &self.questions[..self.questions.len() - self.n_dev]
    }

    pub fn dev_records(&self) -> &[QuestionRecord] {
        &self.questions[self.questions.len() - self.n_dev..]
    }

    pub fn chains_jsonl(&self) -> String {
        jsonl(&self.chains)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::from_documents(self.documents.clone())
    }

    pub fn parsed_questions(&self) -> Result<Vec<Question>> {
        self.questions
            .iter()
            .cloned()
            .map(Question::from_record)
            .collect()
    }

    pub fn chain_map(&self) -> BTreeMap<String, Vec<String>> {
        self.chains
            .iter()
            .map(|c| (c.qid.clone(), c.chain.clone()))
            .collect()
    }

    /// Writes `corpus.jsonl`, `dataset.jsonl`, `train.jsonl`, `dev.jsonl` and `chains.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("corpus.jsonl", self.corpus_jsonl()),
            ("dataset.jsonl", jsonl(&self.questions)),
            ("train.jsonl", jsonl(self.train_records())),
            ("dev.jsonl", jsonl(self.dev_records())),
            ("chains.jsonl", self.chains_jsonl()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub fn parse_chains(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChainRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.qid, rec.chain);
    }
    Ok(out)
}

pub fn load_chains(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_chains(&text)
}

/// True when some document holds every question key term together with the answer tokens.
pub fn single_doc_answerable(
    q: &Question,
    corpus: &Corpus,
    key_terms: usize,
    stoplist: &Stoplist,
) -> bool {
    let Some(ai) = q.answer_idx else { return false };
    let mut needed: Vec<String> = select_key_terms(&q.tokens, corpus.stats(), key_terms, stoplist);
    needed.extend(q.option_tokens[ai].iter().cloned());
    corpus.documents().iter().any(|d| {
        let toks: HashSet<&str> = d.tokens.iter().map(String::as_str).collect();
        needed.iter().all(|t| toks.contains(t.as_str()))
    })
}

/// Qids of questions that a single document could answer.
pub fn unanswerability_violations(
    questions: &[Question],
    corpus: &Corpus,
    key_terms: usize,
    stoplist: &Stoplist,
) -> Vec<String> {
    questions
        .iter()
        .filter(|q| single_doc_answerable(q, corpus, key_terms, stoplist))
        .map(|q| q.qid.clone())
        .collect()
}
