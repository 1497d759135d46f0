//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are the [`Hyper`]
//! field names plus model sizes, retrieval knobs and file paths; any other key
//! is rejected by name.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{PipelineConfig, RerankMode};
use crate::reasoner::{Hyper, ModelDims};
use crate::retrieval::Bm25Params;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hyper: Hyper,
    pub dims: ModelDims,
    pub bm25: Bm25Params,
    pub max_support: usize,
    pub rerank: RerankMode,
    pub min_keep: usize,
    pub top_n: usize,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub chains: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reranker: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            hyper: Hyper::default(),
            dims: ModelDims::default(),
            bm25: p.bm25,
            max_support: p.max_support,
            rerank: p.rerank,
            min_keep: p.min_keep,
            top_n: p.top_n,
            corpus: None,
            dataset: None,
            dev: None,
            chains: None,
            checkpoint: None,
            reranker: None,
            output_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: {value}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one setting. Unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.hyper;
        match key {
            "steps" | "T" => h.steps = parse(key, value)?,
            "lr" => h.lr = parse(key, value)?,
            "decay" => h.decay = parse(key, value)?,
            "epochs" => h.epochs = parse(key, value)?,
            "th_r" => h.th_r = parse(key, value)?,
            "top_k" => h.top_k = parse(key, value)?,
            "key_terms" => h.key_terms = parse(key, value)?,
            "fusion" => h.fusion = value.parse()?,
            "seed" => h.seed = parse(key, value)?,
            "exclude_previous" => h.exclude_previous = parse_bool(key, value)?,
            "stage_one_epochs" => h.stage_one_epochs = parse(key, value)?,
            "batch_size" => h.batch_size = parse(key, value)?,
            "max_grad_norm" => h.max_grad_norm = parse(key, value)?,
            "selection_weight" => h.selection_weight = parse(key, value)?,
            "teacher_forcing" => h.teacher_forcing = parse_bool(key, value)?,
            "freeze_embeddings" => h.freeze_embeddings = parse_bool(key, value)?,
            "embed_dim" => self.dims.embed_dim = parse(key, value)?,
            "hidden_dim" => self.dims.hidden_dim = parse(key, value)?,
            "image_dim" => self.dims.image_dim = parse(key, value)?,
            "bm25_k1" => self.bm25.k1 = parse(key, value)?,
            "bm25_b" => self.bm25.b = parse(key, value)?,
            "max_support" => self.max_support = parse(key, value)?,
            "rerank" => self.rerank = value.parse()?,
            "min_keep" => self.min_keep = parse(key, value)?,
            "top_n" => self.top_n = parse(key, value)?,
            "corpus" => self.corpus = Some(value.into()),
            "dataset" => self.dataset = Some(value.into()),
            "dev" => self.dev = Some(value.into()),
            "chains" => self.chains = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "reranker" => self.reranker = Some(value.into()),
            "output_dir" => self.output_dir = Some(value.into()),
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.dims.embed_dim == 0 || self.dims.hidden_dim == 0 {
            return Err(Error::Config(
                "embed_dim and hidden_dim must be positive".into(),
            ));
        }
        if self.max_support == 0 {
            return Err(Error::Config("max_support must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            bm25: self.bm25,
            top_k: self.hyper.top_k,
            key_terms: self.hyper.key_terms,
            max_support: self.max_support,
            rerank: self.rerank,
            threshold: self.hyper.th_r,
            min_keep: self.min_keep,
            top_n: self.top_n,
        }
    }

    /// Renders every key in a form `parse` reads back to an equal config.
    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("steps", &h.steps);
        kv("lr", &h.lr);
        kv("decay", &h.decay);
        kv("epochs", &h.epochs);
        kv("th_r", &h.th_r);
        kv("top_k", &h.top_k);
        kv("key_terms", &h.key_terms);
        kv("fusion", &h.fusion);
        kv("seed", &h.seed);
        kv("exclude_previous", &h.exclude_previous);
        kv("stage_one_epochs", &h.stage_one_epochs);
        kv("batch_size", &h.batch_size);
        kv("max_grad_norm", &h.max_grad_norm);
        kv("selection_weight", &h.selection_weight);
        kv("teacher_forcing", &h.teacher_forcing);
        kv("freeze_embeddings", &h.freeze_embeddings);
        kv("embed_dim", &self.dims.embed_dim);
        kv("hidden_dim", &self.dims.hidden_dim);
        kv("image_dim", &self.dims.image_dim);
        kv("bm25_k1", &self.bm25.k1);
        kv("bm25_b", &self.bm25.b);
        kv("max_support", &self.max_support);
        kv("rerank", &self.rerank);
        kv("min_keep", &self.min_keep);
        kv("top_n", &self.top_n);
        let paths = [
            ("corpus", &self.corpus),
            ("dataset", &self.dataset),
            ("dev", &self.dev),
            ("chains", &self.chains),
            ("checkpoint", &self.checkpoint),
            ("reranker", &self.reranker),
            ("output_dir", &self.output_dir),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                kv(k, &p.display());
            }
        }
        s
    }
}
