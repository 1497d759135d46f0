//! Multiple-choice question records and their JSONL form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

/// Exam categories; datasets may also carry free-form labels.
pub const CATEGORIES: [&str; 6] = ["BIR", "MIR", "EIR", "FIR", "PIR", "QIR"];

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub qid: String,
    #[serde(default)]
    pub category: String,
    pub question: String,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_idx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_vec: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub qid: String,
    pub category: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub options: Vec<String>,
    pub option_tokens: Vec<Vec<String>>,
    pub answer_idx: Option<usize>,
    pub image_vec: Option<Vec<f64>>,
}

impl Question {
    pub fn from_record(rec: QuestionRecord) -> Result<Self> {
        if rec.options.len() < 2 {
            return Err(Error::invalid(format!(
                "question {} needs at least two options",
                rec.qid
            )));
        }
        if let Some(a) = rec.answer_idx {
            if a >= rec.options.len() {
                return Err(Error::invalid(format!(
                    "question {} has answer_idx {a} but {} options",
                    rec.qid,
                    rec.options.len()
                )));
            }
        }
        Ok(Self {
            tokens: tokenize(&rec.question),
            option_tokens: rec.options.iter().map(|o| tokenize(o)).collect(),
            qid: rec.qid,
            category: rec.category,
            text: rec.question,
            options: rec.options,
            answer_idx: rec.answer_idx,
            image_vec: rec.image_vec,
        })
    }

    pub fn to_record(&self) -> QuestionRecord {
        QuestionRecord {
            qid: self.qid.clone(),
            category: self.category.clone(),
            question: self.text.clone(),
            options: self.options.clone(),
            answer_idx: self.answer_idx,
            image_vec: self.image_vec.clone(),
        }
    }

    pub fn num_options(&self) -> usize {
        self.options.len()
    }
}

pub fn parse_dataset(text: &str) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Question::from_record(rec).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Question>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn dataset_to_jsonl(questions: &[Question]) -> String {
    let mut s = String::new();
    for q in questions {
        s.push_str(&serde_json::to_string(&q.to_record()).expect("record serialises"));
        s.push('\n');
    }
    s
}
