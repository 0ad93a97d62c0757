//! Subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hopdebate_core::debate::DebateLevel;
use hopdebate_core::eval::{read_dataset_file, TokenReport};
use hopdebate_core::retrieval::{build_index, read_corpus_file, Bm25Params};
use hopdebate_core::{Question, QuestionType};
use serde::Serialize;

use crate::config::{BackendSpec, RunConfig};
use crate::pipeline::{
    create_run_dir, read_json, rescore, write_json, write_text, LedgerFile, Pipeline, LEDGER_FILE,
    MANIFEST_FILE, PLAN_FILE, TOKENS_FILE, TRANSCRIPT_FILE,
};

#[derive(Debug, Parser)]
#[command(name = "hopdebate", version, about = "Debate-planned multi-hop question answering")]
pub struct Cli {
    #[command(flatten)]
    pub opts: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalOpts {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Backend override: `mock:<script.json>` or `http:<base url>`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Model name for an http backend.
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub max_rounds: Option<u32>,
    /// L0 (consensus) .. L3 (forced disagreement).
    #[arg(long, global = true)]
    pub debate_level: Option<DebateLevel>,
    #[arg(long, global = true)]
    pub k_docs: Option<usize>,
    /// Root directory for run directories (or the index file for `ingest`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a JSONL corpus.
    Ingest {
        corpus: PathBuf,
    },
    /// Print the question type.
    Classify(QuestionArgs),
    /// Run the debate and print the plan.
    Debate {
        #[command(flatten)]
        question: QuestionArgs,
        /// Skip classification and debate under this type.
        #[arg(long = "type")]
        q_type: Option<String>,
    },
    /// Classify, debate, execute, and print the answer.
    Answer(QuestionArgs),
    /// Answer every question of a dataset and score the predictions.
    Eval {
        /// Dataset JSONL (`id`, `question`, `answers`, optional `type`, `hops`).
        dataset: Option<PathBuf>,
        /// Judge Acc with the backend as well.
        #[arg(long)]
        acc: bool,
        /// Re-score an existing eval run directory without backend calls.
        #[arg(long, value_name = "RUN_DIR", conflicts_with_all = ["dataset", "acc"])]
        rescore: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct QuestionArgs {
    pub question: String,
    #[arg(long, default_value = "question")]
    pub id: String,
}

impl QuestionArgs {
    fn to_question(&self) -> Question {
        Question::new(self.id.clone(), self.question.clone())
    }
}

/// Config file plus flag overrides. Fails before any backend call.
pub fn resolve_config(opts: &GlobalOpts) -> anyhow::Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(flag) = &opts.backend {
        cfg.backend = Some(BackendSpec::from_flag(flag, cfg.backend.as_ref(), opts.model.as_deref())?);
    } else if let (Some(m), Some(BackendSpec::Http(h))) = (&opts.model, &mut cfg.backend) {
        h.model = m.clone();
    }
    if let Some(r) = opts.max_rounds {
        cfg.debate.max_rounds = r;
    }
    if let Some(l) = opts.debate_level {
        cfg.debate.level = l;
    }
    if let Some(k) = opts.k_docs {
        cfg.budget.k_docs = k;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    started_at: String,
    backend: &'a str,
    config: &'a RunConfig,
}

fn start_run(p: &Pipeline, label: &str) -> anyhow::Result<PathBuf> {
    let dir = create_run_dir(&p.cfg.output_dir, label)?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            command: label,
            started_at: chrono::Local::now().to_rfc3339(),
            backend: p.gateway.backend_id(),
            config: &p.cfg,
        },
    )?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

fn write_ledger(p: &Pipeline, dir: &Path) -> anyhow::Result<()> {
    write_json(&dir.join(LEDGER_FILE), &LedgerFile::new(p.gateway.ledger().entries()))?;
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match &cli.command {
        Command::Ingest { corpus } => {
            let Some(index_path) = &cli.opts.out else {
                bail!("ingest needs --out <index file>");
            };
            let summary = ingest(corpus, index_path)?;
            writeln!(out, "documents: {}\nterms: {}", summary.documents, summary.terms)?;
        }
        Command::Classify(args) => {
            let p = Pipeline::new(resolve_config(&cli.opts)?)?;
            let q = args.to_question();
            let dir = start_run(&p, "classify")?;
            let result = p.classify(&q);
            write_ledger(&p, &dir)?;
            let c = result?;
            write_json(&dir.join(crate::pipeline::CLASSIFICATION_FILE), &c)?;
            writeln!(out, "{}", c.label)?;
        }
        Command::Debate { question, q_type } => {
            let p = Pipeline::new(resolve_config(&cli.opts)?)?;
            let q = question.to_question();
            let dir = start_run(&p, "debate")?;
            let result = (|| {
                let label = match q_type {
                    Some(t) => QuestionType::new(t.clone()),
                    None => {
                        let c = p.classify(&q)?;
                        write_json(&dir.join(crate::pipeline::CLASSIFICATION_FILE), &c)?;
                        c.label
                    }
                };
                p.debate(&q, &label)
            })();
            write_ledger(&p, &dir)?;
            let (plan, transcript) = result?;
            write_text(&dir.join(TRANSCRIPT_FILE), &hopdebate_core::debate::transcript_to_jsonl(&transcript))?;
            write_json(&dir.join(PLAN_FILE), &plan)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&plan)?)?;
        }
        Command::Answer(args) => {
            let p = Pipeline::new(resolve_config(&cli.opts)?)?;
            let q = args.to_question();
            let dir = start_run(&p, "answer")?;
            let result = p.answer(&q);
            let artifacts = match result {
                Ok(a) => a,
                Err(e) => {
                    write_ledger(&p, &dir)?;
                    return Err(e.into());
                }
            };
            artifacts.write(&dir)?;
            if artifacts.trace.steps.iter().any(|s| s.degraded) {
                log::warn!("some steps ran degraded; see {}", dir.join(crate::pipeline::TRACE_FILE).display());
            }
            writeln!(out, "{}", artifacts.final_answer())?;
        }
        Command::Eval { dataset, acc, rescore: Some(run_dir) } => {
            let _ = (dataset, acc);
            let report = rescore(run_dir)?;
            writeln!(out, "{}", report.render_table())?;
            if let Ok(tokens) = read_json::<TokenReport>(&run_dir.join(TOKENS_FILE)) {
                writeln!(out, "{}", tokens.render_table())?;
            }
        }
        Command::Eval { dataset, acc, rescore: None } => {
            let Some(dataset) = dataset else {
                bail!("eval needs a dataset path or --rescore <run dir>");
            };
            let cfg = resolve_config(&cli.opts)?;
            let records = read_dataset_file(dataset).with_context(|| dataset.display().to_string())?;
            let p = Pipeline::new(cfg)?;
            let dir = start_run(&p, "eval")?;
            let outcome = p.evaluate(&records, &dir, *acc)?;
            writeln!(out, "{}", outcome.report.render_table())?;
            writeln!(out, "{}", outcome.tokens.render_table())?;
            writeln!(out, "run directory: {}", dir.display())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestSummary {
    pub documents: usize,
    pub terms: usize,
}

pub fn ingest(corpus: &Path, index_path: &Path) -> anyhow::Result<IngestSummary> {
    let docs = read_corpus_file(corpus).with_context(|| corpus.display().to_string())?;
    let index = build_index(docs, Bm25Params::default())?;
    if let Some(parent) = index_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    index.save(index_path).with_context(|| index_path.display().to_string())?;
    Ok(IngestSummary {
        documents: index.doc_count,
        terms: index.postings.len(),
    })
}
