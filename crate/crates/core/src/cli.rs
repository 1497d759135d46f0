//! Command-line front end.
//!
//! Every subcommand reads the same flat config file (`--config`), may override
//! single keys with `--set key=value`, and takes its seed from that config.
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{ingest_corpus, Corpus};
use crate::dataset::{load_dataset, Question};
use crate::error::{Error, Result};
use crate::harness::{
    build_vocab, chain_recovery_rate, format_grid, grid_search_t, prepare_questions,
    relevance_pairs,
};
use crate::reasoner::{
    evaluate, export_trace, train, Model, PreparedQuestion, ReasonOptions, TraceFile,
};
use crate::rerank::{train_reranker, RerankerDims, RerankerModel};
use crate::retrieval::{Retriever, Stoplist};
use crate::synth::{generate_synthetic, load_chains, unanswerability_violations, SynthConfig};

#[derive(Debug, Parser)]
#[command(
    name = "murke",
    version,
    about = "Multi-step retrieval and reasoning over a document corpus"
)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Paths {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    chains: Option<PathBuf>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus file and print its statistics.
    Ingest {
        #[command(flatten)]
        paths: Paths,
    },
    /// BM25 candidates per question, written as JSON lines.
    Retrieve {
        #[command(flatten)]
        paths: Paths,
        #[arg(long)]
        qid: Option<String>,
    },
    /// Train the relevance filter on gold chains and save it.
    Rerank {
        #[command(flatten)]
        paths: Paths,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[command(flatten)]
        paths: Paths,
        /// Dev questions scored after every epoch.
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    Eval {
        #[command(flatten)]
        paths: Paths,
    },
    /// Print the predicted option for one question.
    Answer {
        #[command(flatten)]
        paths: Paths,
        #[arg(long)]
        qid: String,
    },
    /// Write a question's reasoning trace and render it.
    Trace {
        #[command(flatten)]
        paths: Paths,
        #[arg(long)]
        qid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic multi-hop corpus and dataset.
    Synth {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        dev: usize,
        #[arg(long, default_value_t = 2)]
        hops: usize,
        #[arg(long, default_value_t = 5)]
        distractors: usize,
        #[arg(long, default_value_t = 4)]
        options: usize,
        /// Draw answers from a shared pool of this many names (0: unique answers).
        #[arg(long = "answer-pool", default_value_t = 0)]
        answer_pool: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per step count and tabulate dev accuracy.
    GridT {
        #[command(flatten)]
        paths: Paths,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min: usize,
        #[arg(long, default_value_t = 6)]
        max: usize,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_paths(cfg: &mut RunConfig, p: &Paths) {
    let pick = |flag: &Option<PathBuf>, slot: &mut Option<PathBuf>| {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    };
    pick(&p.corpus, &mut cfg.corpus);
    pick(&p.dataset, &mut cfg.dataset);
    pick(&p.checkpoint, &mut cfg.checkpoint);
    pick(&p.chains, &mut cfg.chains);
    pick(&p.out_dir, &mut cfg.output_dir);
}

fn need<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required path {name}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn chains_of(cfg: &RunConfig) -> Result<Option<BTreeMap<String, Vec<String>>>> {
    cfg.chains.as_deref().map(load_chains).transpose()
}

fn reranker_of(cfg: &RunConfig) -> Result<Option<RerankerModel>> {
    cfg.reranker.as_deref().map(RerankerModel::load).transpose()
}

/// Corpus, questions and their prepared supporting sets under `vocab`.
fn prepare(
    cfg: &RunConfig,
    corpus: &Corpus,
    dataset: &Path,
    vocab: &crate::vocab::Vocab,
) -> Result<(Vec<Question>, Vec<PreparedQuestion>)> {
    let questions = load_dataset(dataset)?;
    let chains = chains_of(cfg)?;
    let reranker = reranker_of(cfg)?;
    let prepared = prepare_questions(
        corpus,
        &questions,
        vocab,
        chains.as_ref(),
        &cfg.pipeline(),
        reranker.as_ref(),
    )?;
    Ok((questions, prepared))
}

fn find<'a>(prepared: &'a [PreparedQuestion], qid: &str) -> Result<&'a PreparedQuestion> {
    prepared
        .iter()
        .find(|q| q.qid == qid)
        .ok_or_else(|| Error::NotFound(format!("question {qid}")))
}

fn dispatch(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { paths } => {
            apply_paths(&mut cfg, &paths);
            let corpus = ingest_corpus(need(&cfg.corpus, "corpus")?)?;
            let stats = corpus.stats();
            emit(
                out,
                &format!(
                    "documents\t{}\nterms\t{}\nmean_length\t{:.4}\n",
                    corpus.len(),
                    stats.doc_freq.len(),
                    stats.avg_doc_len
                ),
            )
        }
        Command::Retrieve { paths, qid } => {
            apply_paths(&mut cfg, &paths);
            let corpus = ingest_corpus(need(&cfg.corpus, "corpus")?)?;
            let questions = load_dataset(need(&cfg.dataset, "dataset")?)?;
            let p = cfg.pipeline();
            let retriever = Retriever {
                corpus: &corpus,
                params: p.bm25,
                top_k: p.top_k,
                key_terms: p.key_terms,
                stoplist: Stoplist::english(),
            };
            let mut text = String::new();
            let selected: Vec<&Question> = match &qid {
                Some(id) => vec![questions
                    .iter()
                    .find(|q| &q.qid == id)
                    .ok_or_else(|| Error::NotFound(format!("question {id}")))?],
                None => questions.iter().collect(),
            };
            for q in selected {
                let report = retriever.report(q);
                let line =
                    serde_json::to_string(&report).map_err(|e| Error::invalid(e.to_string()))?;
                text.push_str(&line);
                text.push('\n');
            }
            match &cfg.output_dir {
                Some(dir) => {
                    let path = dir.join("retrieval.jsonl");
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
                    emit(out, &format!("wrote {}\n", path.display()))
                }
                None => emit(out, &text),
            }
        }
        Command::Rerank {
            paths,
            epochs,
            lr,
            out: target,
        } => {
            apply_paths(&mut cfg, &paths);
            need(&cfg.chains, "chains")?;
            let corpus = ingest_corpus(need(&cfg.corpus, "corpus")?)?;
            let questions = load_dataset(need(&cfg.dataset, "dataset")?)?;
            let vocab = build_vocab(&corpus, &questions);
            // candidates come straight from BM25 here; the filter is what is being trained
            cfg.rerank = crate::harness::RerankMode::None;
            cfg.reranker = None;
            let (questions, prepared) =
                prepare(&cfg, &corpus, need(&cfg.dataset, "dataset")?, &vocab)?;
            let pairs = relevance_pairs(&corpus, &prepared, &questions)?;
            let mut model = RerankerModel::new(vocab, RerankerDims::default(), cfg.hyper.seed);
            let curve = train_reranker(&mut model, &pairs, epochs, lr, cfg.hyper.seed)?;
            model.save(&target)?;
            let mut text = format!("pairs\t{}\n", pairs.len());
            for (i, l) in curve.iter().enumerate() {
                let _ = writeln!(text, "epoch {i}\tloss {l:.6}");
            }
            emit(out, &text)
        }
        Command::Train { paths, dev } => {
            apply_paths(&mut cfg, &paths);
            if dev.is_some() {
                cfg.dev = dev;
            }
            let corpus = ingest_corpus(need(&cfg.corpus, "corpus")?)?;
            let train_path = need(&cfg.dataset, "dataset")?.to_path_buf();
            let ckpt = need(&cfg.checkpoint, "checkpoint")?.to_path_buf();
            let mut all = load_dataset(&train_path)?;
            if let Some(d) = &cfg.dev {
                all.extend(load_dataset(d)?);
            }
            let vocab = build_vocab(&corpus, &all);
            let (_, train_set) = prepare(&cfg, &corpus, &train_path, &vocab)?;
            let dev_set = match cfg.dev.clone() {
                Some(d) => Some(prepare(&cfg, &corpus, &d, &vocab)?.1),
                None => None,
            };
            let mut model = Model::new(vocab, cfg.dims, cfg.hyper.fusion, cfg.hyper.seed)?;
            let history = train(&mut model, &train_set, dev_set.as_deref(), &cfg.hyper)?;
            model.save(&ckpt)?;
            if let Some(dir) = &cfg.output_dir {
                write_json(&dir.join("train_metrics.json"), &history)?;
            }
            let last = history.last().map(|m| m.mean_loss).unwrap_or(f64::NAN);
            emit(
                out,
                &format!(
                    "epochs\t{}\nfinal_loss\t{last:.6}\ncheckpoint\t{}\n",
                    history.len(),
                    ckpt.display()
                ),
            )
        }
        Command::Eval { paths } => {
            apply_paths(&mut cfg, &paths);
            let corpus = ingest_corpus(need(&cfg.corpus, "corpus")?)?;
            let model = Model::load(need(&cfg.checkpoint, "checkpoint")?)?;
            let (_, prepared) =
                prepare(&cfg, &corpus, need(&cfg.dataset, "dataset")?, &model.vocab)?;
            let (metrics, outputs) =
                evaluate(&model, &prepared, &ReasonOptions::from_hyper(&cfg.hyper))?;
            let recovery = match chains_of(&cfg)? {
                Some(c) => Some(chain_recovery_rate(&outputs, &c)?),
                None => None,
            };
            #[derive(Serialize)]
            struct EvalFile<'a> {
                metrics: &'a crate::reasoner::Metrics,
                #[serde(skip_serializing_if = "Option::is_none")]
                chain_recovery: Option<f64>,
            }
            if let Some(dir) = &cfg.output_dir {
                write_json(
                    &dir.join("eval_metrics.json"),
                    &EvalFile {
                        metrics: &metrics,
                        chain_recovery: recovery,
                    },
                )?;
            }
            let mut text = format!(
                "n\t{}\naccuracy\t{:.4}\npoints\t{}\n",
                metrics.n, metrics.accuracy, metrics.points
            );
            for (cat, m) in &metrics.per_category {
                let _ = writeln!(
                    text,
                    "category {cat}\tn {}\taccuracy {:.4}\tpoints {}",
                    m.n, m.accuracy, m.points
                );
            }
            if let Some(r) = recovery {
                let _ = writeln!(text, "chain_recovery\t{r:.4}");
            }
            emit(out, &text)
        }
        Command::Answer { paths, qid } => {
            apply_paths(&mut cfg, &paths);
            let corpus = ingest_corpus(need(&cfg.corpus, "corpus")?)?;
            let model = Model::load(need(&cfg.checkpoint, "checkpoint")?)?;
            let (_, prepared) =
                prepare(&cfg, &corpus, need(&cfg.dataset, "dataset")?, &model.vocab)?;
            let q = find(&prepared, &qid)?;
            let o = model.reason(q, &ReasonOptions::from_hyper(&cfg.hyper))?;
            emit(
                out,
                &format!(
                    "{}\t{}\t{}\n",
                    q.qid, o.predicted_index, q.options[o.predicted_index]
                ),
            )
        }
        Command::Trace {
            paths,
            qid,
            out: target,
        } => {
            apply_paths(&mut cfg, &paths);
            let corpus = ingest_corpus(need(&cfg.corpus, "corpus")?)?;
            let model = Model::load(need(&cfg.checkpoint, "checkpoint")?)?;
            let (_, prepared) =
                prepare(&cfg, &corpus, need(&cfg.dataset, "dataset")?, &model.vocab)?;
            let q = find(&prepared, &qid)?;
            let o = model.reason(q, &ReasonOptions::from_hyper(&cfg.hyper))?;
            if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let file = export_trace(&o, q, &target)?;
            emit(out, &render_trace(&file, q))
        }
        Command::Synth {
            n,
            dev,
            hops,
            distractors,
            options,
            answer_pool,
            seed,
            out: dir,
        } => {
            let synth = SynthConfig {
                n_questions: n,
                n_dev: dev,
                hops,
                distractors,
                options,
                answer_pool,
                seed: seed.unwrap_or(cfg.hyper.seed),
                ..SynthConfig::default()
            };
            let data = generate_synthetic(&synth)?;
            data.write(&dir)?;
            let violations = unanswerability_violations(
                &data.parsed_questions()?,
                &data.corpus()?,
                cfg.hyper.key_terms,
                &Stoplist::english(),
            );
            emit(
                out,
                &format!(
                    "questions\t{}\ndocuments\t{}\nsingle_doc_answerable\t{}\nout\t{}\n",
                    data.questions.len(),
                    data.documents.len(),
                    violations.len(),
                    dir.display()
                ),
            )
        }
        Command::GridT {
            paths,
            dev,
            min,
            max,
        } => {
            apply_paths(&mut cfg, &paths);
            let dev = dev
                .or(cfg.dev.clone())
                .ok_or_else(|| Error::Config("missing required path dev".into()))?;
            let corpus = ingest_corpus(need(&cfg.corpus, "corpus")?)?;
            let train_path = need(&cfg.dataset, "dataset")?.to_path_buf();
            let mut all = load_dataset(&train_path)?;
            all.extend(load_dataset(&dev)?);
            let vocab = build_vocab(&corpus, &all);
            let (_, train_set) = prepare(&cfg, &corpus, &train_path, &vocab)?;
            let (_, dev_set) = prepare(&cfg, &corpus, &dev, &vocab)?;
            let rows = grid_search_t(
                || Model::new(vocab.clone(), cfg.dims, cfg.hyper.fusion, cfg.hyper.seed),
                &train_set,
                &dev_set,
                &cfg.hyper,
                min..=max,
            )?;
            let table = format_grid(&rows);
            if let Some(dir) = &cfg.output_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("grid_t.tsv");
                fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
            }
            emit(out, &table)
        }
    }
}

/// Document text per step with the span in `[ ]` and top-γ tokens starred,
/// followed by the span and the γ mass it carries.
pub fn render_trace(file: &TraceFile, q: &PreparedQuestion) -> String {
    let mut s = format!("question {}: {}\n", file.qid, file.question);
    for step in &file.steps {
        let t = &step.trace;
        let tokens = q
            .support
            .iter()
            .find(|d| d.doc_id == t.doc_id)
            .map(|d| d.tokens.as_slice())
            .unwrap_or(&[]);
        let marked: std::collections::HashSet<usize> =
            step.top_gamma.iter().map(|g| g.position).collect();
        let (a, b) = t.span;
        let mut line = String::new();
        for (i, tok) in tokens.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            if i == a {
                line.push('[');
            }
            line.push_str(tok);
            if marked.contains(&i) {
                line.push('*');
            }
            if i == b {
                line.push(']');
            }
        }
        let mass: f64 = t.gamma.get(a..=b).map(|g| g.iter().sum()).unwrap_or(0.0);
        let _ = writeln!(s, "step {} doc {}\n  {line}", t.step, t.doc_id);
        let _ = writeln!(s, "  span {a}..={b} \"{}\" gamma {mass:.4}", step.span_text);
        let scores: Vec<String> = t.choice_scores.iter().map(|x| format!("{x:.4}")).collect();
        let _ = writeln!(s, "  choice_scores {}", scores.join(" "));
    }
    let _ = writeln!(
        s,
        "answer {} {}{}",
        file.predicted_index,
        file.predicted_option,
        if file.truncated {
            " (steps truncated)"
        } else {
            ""
        }
    );
    s
}

/// Entry point used by the binary.
pub fn main_with_args() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let code = run(std::env::args_os(), &mut lock);
    let _ = lock.flush();
    code
}
