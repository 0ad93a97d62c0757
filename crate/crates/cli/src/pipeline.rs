//! classify -> debate -> execute, plus the artifacts each run leaves on
//! disk.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hopdebate_core::classifier::{classify, Classification, ClassifierConfig, ClassifierError};
use hopdebate_core::debate::{run_debate, transcript_from_jsonl, transcript_to_jsonl, DebateError};
use hopdebate_core::eval::{
    evaluate_run, token_report, DatasetRecord, EvalError, MetricReport, Prediction, TokenReport,
};
use hopdebate_core::executor::{execute_plan, ExecutionTrace, ExecutorError};
use hopdebate_core::gateway::{ledger_report, ChatBackend, HttpBackend, LedgerEntry, LedgerReport, MockBackend};
use hopdebate_core::operators::{AdaptiveRouting, OperatorContext, OperatorFixtures};
use hopdebate_core::par;
use hopdebate_core::retrieval::{build_index, read_corpus_file, RetrievalError, RetrievalIndex};
use hopdebate_core::{Execution, ExecutionPlan, Gateway, Question, QuestionType, TokenUsage, Transcript};
use serde::{Deserialize, Serialize};

use crate::config::{BackendSpec, ConfigError, RunConfig};

pub const CLASSIFICATION_FILE: &str = "classification.json";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const PLAN_FILE: &str = "plan.json";
pub const TRACE_FILE: &str = "trace.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TOKENS_FILE: &str = "tokens.json";
pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot load mock script {path}: {source}")]
    Script { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("classification failed: {0}")]
    Classifier(#[from] ClassifierError),
    #[error("debate failed: {0}")]
    Debate(#[from] DebateError),
    #[error("execution failed: {0}")]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything one `answer` run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerArtifacts {
    pub classification: Classification,
    pub transcript: Transcript,
    pub plan: ExecutionPlan,
    pub trace: ExecutionTrace,
    pub ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerFile {
    pub entries: Vec<LedgerEntry>,
    pub report: LedgerReport,
}

impl LedgerFile {
    pub fn new(entries: Vec<LedgerEntry>) -> Self {
        let report = ledger_report(&entries);
        Self { entries, report }
    }
}

impl AnswerArtifacts {
    pub fn final_answer(&self) -> &str {
        &self.trace.final_answer
    }

    /// Usage summed from the stage records rather than the ledger.
    pub fn recorded_usage(&self) -> TokenUsage {
        self.classification.usage + self.transcript.total_usage() + self.trace.recomputed_usage()
    }

    pub fn ledger_total(&self) -> TokenUsage {
        self.ledger.iter().map(|e| e.usage).sum()
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        write_json(&dir.join(CLASSIFICATION_FILE), &self.classification)?;
        write_text(&dir.join(TRANSCRIPT_FILE), &transcript_to_jsonl(&self.transcript))?;
        write_json(&dir.join(PLAN_FILE), &self.plan)?;
        write_json(&dir.join(TRACE_FILE), &self.trace)?;
        write_json(&dir.join(LEDGER_FILE), &LedgerFile::new(self.ledger.clone()))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let classification: Classification = read_json(&dir.join(CLASSIFICATION_FILE))?;
        let path = dir.join(TRANSCRIPT_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let transcript = transcript_from_jsonl(&classification.question_id, &text).map_err(|e| {
            PipelineError::Artifact {
                path: path.clone(),
                message: e.to_string(),
            }
        })?;
        let ledger: LedgerFile = read_json(&dir.join(LEDGER_FILE))?;
        Ok(Self {
            classification,
            transcript,
            plan: read_json(&dir.join(PLAN_FILE))?,
            trace: read_json(&dir.join(TRACE_FILE))?,
            ledger: ledger.entries,
        })
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("artifact types serialize"));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Artifact {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Creates `<root>/<label>-<timestamp>`, adding a numeric suffix rather
/// than reusing an existing directory.
pub fn create_run_dir(root: &Path, label: &str) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{label}-{stamp}");
    for n in 0u32.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!("u32 suffixes exhausted")
}

/// Directory-safe form of a question id.
pub fn safe_name(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        "_".to_string()
    } else {
        s
    }
}

pub fn build_backend(spec: &BackendSpec) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    Ok(match spec {
        BackendSpec::Mock { script } => Arc::new(MockBackend::from_file(script).map_err(|source| {
            PipelineError::Script {
                path: script.clone(),
                source,
            }
        })?),
        BackendSpec::Http(cfg) => Arc::new(HttpBackend::new(cfg.clone().with_env_key())),
    })
}

/// Loads the configured index, or indexes the configured corpus. A
/// missing file is not fatal: retrieval steps then run closed-book.
pub fn load_retriever(cfg: &RunConfig) -> Result<Option<RetrievalIndex>, PipelineError> {
    if let Some(path) = &cfg.index {
        if path.exists() {
            return Ok(Some(RetrievalIndex::load(path)?));
        }
        log::warn!("index {} not found; retrieval steps will run closed-book", path.display());
        return Ok(None);
    }
    if let Some(path) = &cfg.corpus {
        if path.exists() {
            return Ok(Some(build_index(read_corpus_file(path)?, Default::default())?));
        }
        log::warn!("corpus {} not found; retrieval steps will run closed-book", path.display());
    }
    Ok(None)
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub classifier: ClassifierConfig,
    pub gateway: Gateway,
    pub index: Option<RetrievalIndex>,
    pub fixtures: OperatorFixtures,
    pub routing: AdaptiveRouting,
    pub exec: Execution,
}

impl Pipeline {
    /// Validates `cfg` before touching the backend.
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let backend = build_backend(cfg.backend.as_ref().expect("validated"))?;
        Self::with_backend(cfg, backend)
    }

    pub fn with_backend(cfg: RunConfig, backend: Arc<dyn ChatBackend>) -> Result<Self, PipelineError> {
        let classifier = cfg.classifier_config()?;
        let index = load_retriever(&cfg)?;
        Ok(Self {
            cfg,
            classifier,
            gateway: Gateway::new(backend),
            index,
            fixtures: OperatorFixtures::default(),
            routing: AdaptiveRouting::default(),
            exec: Execution::default(),
        })
    }

    pub fn classify(&self, q: &Question) -> Result<Classification, PipelineError> {
        Ok(classify(q, &self.classifier, &self.gateway.scoped(&q.id))?)
    }

    pub fn debate(&self, q: &Question, q_type: &QuestionType) -> Result<(ExecutionPlan, Transcript), PipelineError> {
        Ok(run_debate(q, q_type, &self.cfg.debate, &self.gateway.scoped(&q.id), &self.routing)?)
    }

    pub fn answer(&self, q: &Question) -> Result<AnswerArtifacts, PipelineError> {
        let gw = self.gateway.scoped(&q.id);
        let classification = classify(q, &self.classifier, &gw)?;
        let (plan, transcript) = run_debate(q, &classification.label, &self.cfg.debate, &gw, &self.routing)?;
        let mut ctx = OperatorContext::new(
            &gw,
            self.index.as_ref().map(|i| i as _),
            &self.fixtures,
            &self.routing,
        )
        .with_budget(self.cfg.budget);
        ctx.temperature = self.cfg.executor_temperature;
        let trace = execute_plan(&plan, q, &classification.label, &ctx)?;
        Ok(AnswerArtifacts {
            classification,
            transcript,
            plan,
            trace,
            ledger: self.gateway.ledger().entries_for(&q.id),
        })
    }

    /// Answers every record under the configured concurrency bound,
    /// writing each question's artifacts under `dir/questions/`. A failed
    /// question becomes a failed prediction; the run goes on.
    pub fn answer_all(&self, records: &[DatasetRecord], dir: &Path) -> Result<Vec<Prediction>, PipelineError> {
        let qdir = dir.join("questions");
        fs::create_dir_all(&qdir).map_err(io_err(&qdir))?;
        let mut used = BTreeSet::new();
        let dirs: Vec<PathBuf> = records
            .iter()
            .map(|r| {
                let base = safe_name(&r.id);
                let mut name = base.clone();
                let mut n = 1;
                while !used.insert(name.clone()) {
                    n += 1;
                    name = format!("{base}-{n}");
                }
                qdir.join(name)
            })
            .collect();
        let jobs: Vec<(&DatasetRecord, &PathBuf)> = records.iter().zip(&dirs).collect();
        par::map_bounded(self.exec, self.cfg.concurrency, &jobs, |(rec, d)| {
            self.answer_one(rec, d)
        })
        .into_iter()
        .collect()
    }

    fn answer_one(&self, rec: &DatasetRecord, dir: &Path) -> Result<Prediction, PipelineError> {
        fs::create_dir(dir).map_err(io_err(dir))?;
        let q = rec.to_question();
        match self.answer(&q) {
            Ok(a) => {
                a.write(dir)?;
                Ok(Prediction {
                    id: rec.id.clone(),
                    answer: a.trace.final_answer.clone(),
                    q_type: Some(a.classification.label.to_string()),
                    usage: a.ledger_total(),
                    failed: false,
                    error: None,
                    acc: None,
                })
            }
            Err(e) => {
                log::warn!("{}: {e}", rec.id);
                let entries = self.gateway.ledger().entries_for(&rec.id);
                write_json(&dir.join(LEDGER_FILE), &LedgerFile::new(entries.clone()))?;
                Ok(Prediction {
                    id: rec.id.clone(),
                    answer: String::new(),
                    q_type: None,
                    usage: entries.iter().map(|e| e.usage).sum(),
                    failed: true,
                    error: Some(e.to_string()),
                    acc: None,
                })
            }
        }
    }

    /// Full evaluation into `dir`: per-question artifacts, predictions,
    /// the dataset copy, the metric report and the token report.
    pub fn evaluate(&self, records: &[DatasetRecord], dir: &Path, with_acc: bool) -> Result<EvalOutcome, PipelineError> {
        let mut predictions = self.answer_all(records, dir)?;
        let acc_gw = with_acc.then_some(&self.gateway);
        let report = evaluate_run(&predictions, records, acc_gw, self.exec)?;
        for (p, r) in predictions.iter_mut().zip(&report.records) {
            p.acc = r.acc;
        }
        let ledger = self.gateway.ledger().entries();
        let tokens = token_report(&ledger, Some(records.len()));
        write_jsonl(&dir.join(PREDICTIONS_FILE), &predictions)?;
        write_jsonl(&dir.join(DATASET_FILE), records)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        write_json(&dir.join(TOKENS_FILE), &tokens)?;
        write_json(&dir.join(LEDGER_FILE), &LedgerFile::new(ledger))?;
        Ok(EvalOutcome {
            predictions,
            report,
            tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
    pub tokens: TokenReport,
}

/// Recomputes the metric report of an eval run directory from its
/// persisted predictions and dataset copy, without a backend.
pub fn rescore(dir: &Path) -> Result<MetricReport, PipelineError> {
    let predictions: Vec<Prediction> = read_jsonl(&dir.join(PREDICTIONS_FILE))?;
    let dataset: Vec<DatasetRecord> = read_jsonl(&dir.join(DATASET_FILE))?;
    Ok(evaluate_run(&predictions, &dataset, None, Execution::default())?)
}
