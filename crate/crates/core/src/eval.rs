//! Answer metrics, per-type reports, token consumption and the attitude
//! matrix analysis of debate transcripts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, CompletionRequest, Gateway, LedgerEntry, LlmError};
use crate::model::{OperatorKind, Question, QuestionType, Role, TokenUsage, Transcript};
use crate::par::{self, Execution};

pub const ACC_TAG: &str = "eval.acc";
pub const ATTITUDE_TAG: &str = "eval.attitude";
/// Label used in reports for records with neither a declared nor a
/// predicted type.
pub const UNLABELED: &str = "Unlabeled";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no gold answers for {0:?}")]
    NoGold(String),
    #[error("prediction {0:?} has no matching dataset record")]
    IdMismatch(String),
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn require_gold(golds: &[String]) -> Result<(), EvalError> {
    if golds.is_empty() {
        Err(EvalError::NoGold(String::new()))
    } else {
        Ok(())
    }
}

/// 1 when the normalized prediction equals some normalized gold answer.
pub fn exact_match(pred: &str, golds: &[String]) -> Result<u8, EvalError> {
    require_gold(golds)?;
    let p = normalize_answer(pred);
    Ok(u8::from(golds.iter().any(|g| normalize_answer(g) == p)))
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-overlap F1, maximised over the gold answers.
pub fn token_f1(pred: &str, golds: &[String]) -> Result<f64, EvalError> {
    require_gold(golds)?;
    Ok(golds.iter().map(|g| f1_single(pred, g)).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccJudgment {
    pub value: u8,
    /// True when the reply was not YES/NO and exact match was used.
    pub fell_back: bool,
    pub usage: TokenUsage,
}

pub fn acc_prompt(pred: &str, golds: &[String], question: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(
            "You check whether a predicted answer to a question is semantically consistent with the reference answers. Reply with YES or NO only.",
        ),
        ChatMessage::user(format!(
            "Question: {}\nReference answers: {}\nPrediction: {}\nIs the prediction consistent with a reference answer?",
            question.trim(),
            golds.join(" | "),
            pred.trim()
        )),
    ]
}

/// `Some(true)` for YES, `Some(false)` for NO, judged on the first word.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_ascii_uppercase();
    match word.as_str() {
        "YES" => Some(true),
        "NO" => Some(false),
        _ => None,
    }
}

/// LLM-judged semantic consistency; falls back to exact match when the
/// reply is not YES/NO.
pub fn acc_llm(
    pred: &str,
    golds: &[String],
    question: &str,
    gateway: &Gateway,
) -> Result<AccJudgment, EvalError> {
    require_gold(golds)?;
    let resp = gateway.complete(&CompletionRequest::new(
        ACC_TAG,
        acc_prompt(pred, golds, question),
        0.0,
    ))?;
    Ok(match parse_yes_no(&resp.content) {
        Some(v) => AccJudgment {
            value: u8::from(v),
            fell_back: false,
            usage: resp.usage,
        },
        None => AccJudgment {
            value: exact_match(pred, golds)?,
            fell_back: true,
            usage: resp.usage,
        },
    })
}

/// One line of a dataset JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub q_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u8>,
}

impl DatasetRecord {
    pub fn to_question(&self) -> Question {
        Question {
            id: self.id.clone(),
            text: self.question.clone(),
            gold_answers: self.answers.clone(),
            declared_type: self.q_type.as_deref().map(QuestionType::new),
            hops: self.hops,
        }
    }
}

pub fn read_dataset(reader: impl BufRead) -> Result<Vec<DatasetRecord>, EvalError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Err(e) = rec.to_question().validate() {
            return Err(EvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(EvalError::Parse {
                line: i + 1,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<DatasetRecord>, EvalError> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// A pipeline answer for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    /// Type assigned by the classifier, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_type: Option<String>,
    #[serde(default)]
    pub usage: TokenUsage,
    /// Set when the pipeline could not produce an answer.
    #[serde(default)]
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Precomputed semantic-consistency judgment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    pub q_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u8>,
    pub prediction: String,
    /// `None` when the record has no gold answer or the prediction failed.
    pub em: Option<u8>,
    pub f1: Option<f64>,
    pub acc: Option<u8>,
    pub usage: TokenUsage,
    pub failed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Records with metrics (not failed, with gold answers).
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    /// Mean over records with an acc judgment.
    pub acc: Option<f64>,
    pub acc_count: usize,
    pub avg_prompt_tokens: f64,
}

impl Aggregate {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a RecordMetrics>) -> Aggregate {
        let mut count = 0usize;
        let (mut em, mut f1) = (0.0, 0.0);
        let (mut acc, mut acc_count) = (0.0, 0usize);
        let (mut prompt, mut all) = (0u64, 0usize);
        for r in records {
            all += 1;
            prompt += r.usage.prompt_tokens;
            if let (Some(e), Some(f)) = (r.em, r.f1) {
                count += 1;
                em += e as f64;
                f1 += f;
            }
            if let Some(a) = r.acc {
                acc_count += 1;
                acc += a as f64;
            }
        }
        Aggregate {
            count,
            em: if count > 0 { em / count as f64 } else { 0.0 },
            f1: if count > 0 { f1 / count as f64 } else { 0.0 },
            acc: (acc_count > 0).then(|| acc / acc_count as f64),
            acc_count,
            avg_prompt_tokens: if all > 0 { prompt as f64 / all as f64 } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<RecordMetrics>,
    pub overall: Aggregate,
    pub by_type: BTreeMap<String, Aggregate>,
    pub by_hops: BTreeMap<u8, Aggregate>,
    pub failed: usize,
}

impl MetricReport {
    pub fn from_records(records: Vec<RecordMetrics>) -> MetricReport {
        let ok: Vec<&RecordMetrics> = records.iter().filter(|r| !r.failed).collect();
        let mut types: BTreeMap<String, Vec<&RecordMetrics>> = BTreeMap::new();
        let mut hops: BTreeMap<u8, Vec<&RecordMetrics>> = BTreeMap::new();
        for r in &ok {
            types.entry(r.q_type.clone()).or_default().push(r);
            if let Some(h) = r.hops {
                hops.entry(h).or_default().push(r);
            }
        }
        MetricReport {
            overall: Aggregate::of(ok.iter().copied()),
            by_type: types.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect(),
            by_hops: hops.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect(),
            failed: records.len() - ok.len(),
            records,
        }
    }

    /// Plain-text table of the aggregates.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>6} {:>8} {:>8} {:>8} {:>12}\n",
            "slice", "n", "EM", "F1", "Acc", "prompt/q"
        );
        let mut row = |name: &str, a: &Aggregate| {
            let acc = a.acc.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
            out.push_str(&format!(
                "{:<20} {:>6} {:>8.4} {:>8.4} {:>8} {:>12.1}\n",
                name, a.count, a.em, a.f1, acc, a.avg_prompt_tokens
            ));
        };
        row("overall", &self.overall);
        for (t, a) in &self.by_type {
            row(&format!("type={t}"), a);
        }
        for (h, a) in &self.by_hops {
            row(&format!("hops={h}"), a);
        }
        if self.failed > 0 {
            out.push_str(&format!("failed records excluded: {}\n", self.failed));
        }
        out
    }
}

/// Scores every prediction against its dataset record. Acc is taken from
/// the prediction when present, otherwise judged by `acc_backend` when
/// given.
pub fn evaluate_run(
    predictions: &[Prediction],
    dataset: &[DatasetRecord],
    acc_backend: Option<&Gateway>,
    exec: Execution,
) -> Result<MetricReport, EvalError> {
    let by_id: BTreeMap<&str, &DatasetRecord> = dataset.iter().map(|r| (r.id.as_str(), r)).collect();
    for p in predictions {
        if !by_id.contains_key(p.id.as_str()) {
            return Err(EvalError::IdMismatch(p.id.clone()));
        }
    }
    let records = par::map(exec, predictions, |p| -> Result<RecordMetrics, EvalError> {
        let rec = by_id[p.id.as_str()];
        let q_type = rec
            .q_type
            .clone()
            .or_else(|| p.q_type.clone())
            .unwrap_or_else(|| UNLABELED.to_string());
        let scored = !p.failed && !rec.answers.is_empty();
        let (em, f1) = if scored {
            (
                Some(exact_match(&p.answer, &rec.answers)?),
                Some(token_f1(&p.answer, &rec.answers)?),
            )
        } else {
            (None, None)
        };
        let acc = match (p.acc, acc_backend) {
            (Some(a), _) => Some(a),
            (None, Some(gw)) if scored => {
                let gw = gw.scoped(&p.id);
                Some(acc_llm(&p.answer, &rec.answers, &rec.question, &gw)?.value)
            }
            _ => None,
        };
        Ok(RecordMetrics {
            id: p.id.clone(),
            q_type,
            hops: rec.hops,
            prediction: p.answer.clone(),
            em,
            f1,
            acc,
            usage: p.usage,
            failed: p.failed,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport::from_records(records))
}

pub const MATRIX_DIM: usize = OperatorKind::ALL.len();

/// Operator-pair scores indexed by [`OperatorKind::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttitudeMatrix(pub [[f64; MATRIX_DIM]; MATRIX_DIM]);

impl AttitudeMatrix {
    pub const ZERO: AttitudeMatrix = AttitudeMatrix([[0.0; MATRIX_DIM]; MATRIX_DIM]);

    pub fn filled(v: f64) -> Self {
        AttitudeMatrix([[v; MATRIX_DIM]; MATRIX_DIM])
    }

    pub fn get(&self, a: OperatorKind, b: OperatorKind) -> f64 {
        self.0[a.index()][b.index()]
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|v| *v *= k);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = *self;
        for (row, orow) in out.0.iter_mut().zip(other.0.iter()) {
            for (v, o) in row.iter_mut().zip(orow.iter()) {
                *v += o;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub beta: f64,
    pub similarity_phrase_map: BTreeMap<String, f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.8,
            similarity_phrase_map: BTreeMap::from([
                ("identical".to_string(), 1.0),
                ("very similar".to_string(), 0.7),
                ("similar".to_string(), 0.5),
                ("somewhat related".to_string(), 0.3),
                ("unrelated".to_string(), 0.0),
            ]),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(EvalError::InvalidConfig(format!("{name} = {w} outside [0, 1]")));
            }
        }
        if let Some((p, v)) = self.similarity_phrase_map.iter().find(|(_, v)| !v.is_finite()) {
            return Err(EvalError::InvalidConfig(format!("phrase {p:?} maps to {v}")));
        }
        Ok(())
    }

    /// Score of the longest configured phrase contained in `reply`
    /// (case-insensitive, on word boundaries); `None` if none matches.
    pub fn map_phrase(&self, reply: &str) -> Option<f64> {
        let text = reply.to_lowercase();
        self.similarity_phrase_map
            .iter()
            .filter(|(p, _)| contains_phrase(&text, &p.to_lowercase()))
            .max_by_key(|(p, _)| p.len())
            .map(|(_, v)| *v)
    }
}

fn contains_phrase(text: &str, phrase: &str) -> bool {
    if phrase.is_empty() {
        return false;
    }
    let bytes = text.as_bytes();
    let boundary = |i: usize| i >= bytes.len() || !bytes[i].is_ascii_alphanumeric();
    text.match_indices(phrase)
        .any(|(i, _)| (i == 0 || boundary(i - 1)) && boundary(i + phrase.len()))
}

/// F_{f→s} = α(F_ad + F_nd) + (1−α)(F_fast + F_slow), all of round t.
pub fn combine_f_to_s(
    ad: &AttitudeMatrix,
    nd: &AttitudeMatrix,
    fast: &AttitudeMatrix,
    slow: &AttitudeMatrix,
    alpha: f64,
) -> AttitudeMatrix {
    ad.add(nd).scale(alpha).add(&fast.add(slow).scale(1.0 - alpha))
}

/// F_{s→f} = β(F_ad^t + F_nd^t) + (1−β)(F_fast^{t−1} + F_slow^{t−1}).
pub fn combine_s_to_f(
    ad: &AttitudeMatrix,
    nd: &AttitudeMatrix,
    prev_fast: &AttitudeMatrix,
    prev_slow: &AttitudeMatrix,
    beta: f64,
) -> AttitudeMatrix {
    ad.add(nd).scale(beta).add(&prev_fast.add(prev_slow).scale(1.0 - beta))
}

/// Per-round debater matrices, four per round in speaking order.
pub type RoundMatrices = [AttitudeMatrix; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAttitude {
    pub round: u32,
    pub per_debater: BTreeMap<Role, AttitudeMatrix>,
    pub f_to_s: AttitudeMatrix,
    pub s_to_f: AttitudeMatrix,
}

/// Combines per-round debater matrices. Round 1 uses zero matrices for the
/// missing previous second level.
pub fn combine_rounds(rounds: &[RoundMatrices], cfg: &AnalysisConfig) -> Vec<RoundAttitude> {
    let mut out = Vec::with_capacity(rounds.len());
    for (i, [ad, nd, fast, slow]) in rounds.iter().enumerate() {
        let (pf, ps) = if i == 0 {
            (AttitudeMatrix::ZERO, AttitudeMatrix::ZERO)
        } else {
            (rounds[i - 1][2], rounds[i - 1][3])
        };
        out.push(RoundAttitude {
            round: i as u32 + 1,
            per_debater: BTreeMap::from([
                (Role::Affirmative, *ad),
                (Role::Negative, *nd),
                (Role::Fast, *fast),
                (Role::Slow, *slow),
            ]),
            f_to_s: combine_f_to_s(ad, nd, fast, slow, cfg.alpha),
            s_to_f: combine_s_to_f(ad, nd, &pf, &ps, cfg.beta),
        });
    }
    out
}

fn pair_description(a: OperatorKind, b: OperatorKind) -> String {
    if a == b {
        format!("{a} used alone")
    } else {
        format!("{a} followed by {b}")
    }
}

pub fn attitude_prompt(utterance: &str, a: OperatorKind, b: OperatorKind, phrases: &[&str]) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(format!(
            "You rate how strongly a debate viewpoint endorses an operator combination. Reply with exactly one of: {}.",
            phrases.join(", ")
        )),
        ChatMessage::user(format!(
            "Viewpoint: {}\nOperator combination: {}\nHow similar is the viewpoint to this combination?",
            utterance.trim(),
            pair_description(a, b)
        )),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttitudeAnalysis {
    pub question_id: String,
    pub rounds: Vec<RoundAttitude>,
    /// Scorer replies that matched no configured phrase (scored 0).
    pub unmapped: Vec<String>,
    pub usage: TokenUsage,
}

/// Scores every debater utterance of `transcript` against every operator
/// pair with `scorer`, then combines the matrices round by round.
pub fn attitude_scores(
    transcript: &Transcript,
    cfg: &AnalysisConfig,
    scorer: &Gateway,
    exec: Execution,
) -> Result<AttitudeAnalysis, EvalError> {
    cfg.validate()?;
    let phrases: Vec<&str> = cfg.similarity_phrase_map.keys().map(String::as_str).collect();
    let mut jobs: Vec<(usize, usize, OperatorKind, OperatorKind, String)> = Vec::new();
    let rounds = transcript.rounds();
    for t in 1..=rounds {
        for (ri, role) in Role::DEBATERS.iter().enumerate() {
            let text: Vec<&str> = transcript.in_round(*role, t).map(|u| u.content.as_str()).collect();
            if text.is_empty() {
                continue;
            }
            let text = text.join("\n\n");
            for a in OperatorKind::ALL {
                for b in OperatorKind::ALL {
                    jobs.push(((t - 1) as usize, ri, a, b, text.clone()));
                }
            }
        }
    }
    let scored = par::map(exec, &jobs, |(_, _, a, b, text)| {
        scorer
            .complete(&CompletionRequest::new(ATTITUDE_TAG, attitude_prompt(text, *a, *b, &phrases), 0.0))
    });
    let mut matrices: Vec<RoundMatrices> = vec![[AttitudeMatrix::ZERO; 4]; rounds as usize];
    let mut unmapped = Vec::new();
    let mut usage = TokenUsage::ZERO;
    for ((t, ri, a, b, _), resp) in jobs.iter().zip(scored) {
        let resp = resp?;
        usage += resp.usage;
        let v = match cfg.map_phrase(&resp.content) {
            Some(v) => v,
            None => {
                log::warn!("unmapped similarity phrase {:?}; scoring 0", resp.content);
                unmapped.push(resp.content.clone());
                0.0
            }
        };
        matrices[*t][*ri].0[a.index()][b.index()] = v;
    }
    Ok(AttitudeAnalysis {
        question_id: transcript.question_id.clone(),
        rounds: combine_rounds(&matrices, cfg),
        unmapped,
        usage,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseUsage {
    pub usage: TokenUsage,
    pub avg_prompt_tokens_per_question: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub questions: usize,
    pub by_phase: BTreeMap<String, PhaseUsage>,
    pub per_question: BTreeMap<String, TokenUsage>,
    pub total: TokenUsage,
    pub avg_prompt_tokens_per_question: f64,
}

impl TokenReport {
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>14} {:>14} {:>16}\n",
            "phase", "prompt", "completion", "prompt/question"
        );
        for (phase, p) in &self.by_phase {
            out.push_str(&format!(
                "{:<12} {:>14} {:>14} {:>16.1}\n",
                phase, p.usage.prompt_tokens, p.usage.completion_tokens, p.avg_prompt_tokens_per_question
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>14} {:>14} {:>16.1}\n",
            "total", self.total.prompt_tokens, self.total.completion_tokens, self.avg_prompt_tokens_per_question
        ));
        out
    }
}

/// Phase of a ledger tag: the part before the first `.`.
pub fn phase_of(tag: &str) -> &str {
    tag.split('.').next().unwrap_or(tag)
}

/// Token consumption by phase and per question. `questions` defaults to
/// the number of distinct scopes in the ledger.
pub fn token_report(entries: &[LedgerEntry], questions: Option<usize>) -> TokenReport {
    let mut by_phase: BTreeMap<String, TokenUsage> = BTreeMap::new();
    let mut per_question: BTreeMap<String, TokenUsage> = BTreeMap::new();
    for e in entries {
        *by_phase.entry(phase_of(&e.tag).to_string()).or_default() += e.usage;
        if let Some(s) = &e.scope {
            *per_question.entry(s.clone()).or_default() += e.usage;
        }
    }
    let n = questions.unwrap_or(per_question.len());
    let avg = |u: &TokenUsage| if n > 0 { u.prompt_tokens as f64 / n as f64 } else { 0.0 };
    let total: TokenUsage = by_phase.values().copied().sum();
    TokenReport {
        questions: n,
        by_phase: by_phase
            .into_iter()
            .map(|(k, u)| {
                let p = PhaseUsage {
                    usage: u,
                    avg_prompt_tokens_per_question: avg(&u),
                };
                (k, p)
            })
            .collect(),
        per_question,
        avg_prompt_tokens_per_question: avg(&total),
        total,
    }
}
