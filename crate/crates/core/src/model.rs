//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is a plain value type: no I/O, no prompt text, no model
//! access. Canonical serialization is JSON with fields in declaration order
//! and `BTreeMap` for every keyed collection, so output bytes are stable.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::debate::DebateConfig;

/// Labels of the default question-type taxonomy.
pub const INFERENCE: &str = "Inference";
pub const COMPARISON: &str = "Comparison";
pub const TEMPORAL: &str = "Temporal";
pub const NULL: &str = "Null";

/// A multi-hop question, optionally labelled with gold answers, a declared
/// type and a hop count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_type: Option<QuestionType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u8>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_answers: Vec::new(),
            declared_type: None,
            hops: None,
        }
    }

    pub fn with_gold(mut self, answers: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.gold_answers = answers.into_iter().map(Into::into).collect();
        self
    }

    /// Checks the text and hop-count invariants.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyQuestion(self.id.clone()));
        }
        if let Some(h) = self.hops {
            if !(2..=4).contains(&h) {
                return Err(ModelError::InvalidHops(h));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("question {0:?} has empty text")]
    EmptyQuestion(String),
    #[error("hop count {0} outside 2..=4")]
    InvalidHops(u8),
    #[error("label {0:?} is not in the active label set")]
    UnknownLabel(String),
}

/// A question-type label. The admissible labels are configuration (see
/// [`LabelSet`]), so this is a string newtype rather than an enum.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionType(String);

impl QuestionType {
    pub fn new(label: impl Into<String>) -> Self {
        Self(label.into())
    }

    pub fn null() -> Self {
        Self(NULL.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for QuestionType {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// Ordered, closed set of question-type labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self(labels.into_iter().map(Into::into).collect())
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.iter().any(|l| l == label)
    }

    /// Returns the label as a [`QuestionType`] if it belongs to the set.
    pub fn get(&self, label: &str) -> Result<QuestionType, ModelError> {
        if self.contains(label) {
            Ok(QuestionType::new(label))
        } else {
            Err(ModelError::UnknownLabel(label.to_string()))
        }
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::new([INFERENCE, COMPARISON, TEMPORAL, NULL])
    }
}

/// The five reasoning operators of the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    CoT,
    SingleStep,
    IterativeStep,
    SubStep,
    AdaptiveStep,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 5] = [
        OperatorKind::CoT,
        OperatorKind::SingleStep,
        OperatorKind::IterativeStep,
        OperatorKind::SubStep,
        OperatorKind::AdaptiveStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::CoT => "CoT",
            OperatorKind::SingleStep => "SingleStep",
            OperatorKind::IterativeStep => "IterativeStep",
            OperatorKind::SubStep => "SubStep",
            OperatorKind::AdaptiveStep => "AdaptiveStep",
        }
    }

    /// Position in [`OperatorKind::ALL`]; used as the matrix index.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the operator consults the retrieval index.
    pub fn uses_retrieval(self) -> bool {
        !matches!(self, OperatorKind::CoT)
    }

    /// Lenient name lookup: case, spacing and punctuation are ignored and
    /// the usual aliases (`self-ask`, `ircot`, `chain of thought`, ...)
    /// are accepted.
    pub fn parse_lenient(raw: &str) -> Option<OperatorKind> {
        let key: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        let kind = match key.as_str() {
            "cot" | "chainofthought" => OperatorKind::CoT,
            "singlestep" | "singlestepretrieval" | "single" => OperatorKind::SingleStep,
            "iterativestep" | "iterative" | "ircot" | "iterativestepretrieval" => {
                OperatorKind::IterativeStep
            }
            "substep" | "substepquestion" | "subquestion" | "selfask" | "substepdecomposition" => {
                OperatorKind::SubStep
            }
            "adaptivestep" | "adaptive" | "adaptivestepretrieval" => OperatorKind::AdaptiveStep,
            _ => return None,
        };
        Some(kind)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An operator together with the text that introduces it to the debaters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operator {
    pub kind: OperatorKind,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub operator: OperatorKind,
    #[serde(default)]
    pub directive: String,
    #[serde(default)]
    pub depends_on: Vec<usize>,
}

impl PlanStep {
    pub fn new(operator: OperatorKind, directive: impl Into<String>) -> Self {
        Self {
            operator,
            directive: directive.into(),
            depends_on: Vec::new(),
        }
    }

    pub fn after(mut self, deps: impl IntoIterator<Item = usize>) -> Self {
        self.depends_on = deps.into_iter().collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceMode {
    Hard,
    Soft,
}

/// The judge's ordered plan. Steps form a DAG linearized in execution
/// order: every dependency points to an earlier step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub steps: Vec<PlanStep>,
    pub source_mode: SourceMode,
    pub judge_rationale: String,
    pub rounds_used: u32,
}

impl ExecutionPlan {
    pub fn operators(&self) -> Vec<OperatorKind> {
        self.steps.iter().map(|s| s.operator).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanViolation {
    EmptySteps,
    ForwardDependency { step: usize, depends_on: usize },
    RoundsOutOfRange { rounds_used: u32, max_rounds: u32 },
    SoftBeforeRoundLimit { rounds_used: u32, max_rounds: u32 },
    OperatorNotInPool { step: usize, operator: OperatorKind },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::EmptySteps => write!(f, "empty steps"),
            PlanViolation::ForwardDependency { step, depends_on } => write!(
                f,
                "forward dependency: step {step} depends on step {depends_on}"
            ),
            PlanViolation::RoundsOutOfRange {
                rounds_used,
                max_rounds,
            } => write!(f, "rounds_used {rounds_used} outside 1..={max_rounds}"),
            PlanViolation::SoftBeforeRoundLimit {
                rounds_used,
                max_rounds,
            } => write!(
                f,
                "soft-mode plan after {rounds_used} rounds, expected {max_rounds}"
            ),
            PlanViolation::OperatorNotInPool { step, operator } => {
                write!(f, "step {step} uses {operator}, which is not in the operator pool")
            }
        }
    }
}

/// Collects every invariant violation of `plan` under `cfg`. An empty list
/// means the plan is valid.
pub fn plan_validate(plan: &ExecutionPlan, cfg: &DebateConfig) -> Vec<PlanViolation> {
    let mut out = check_steps(&plan.steps, cfg);
    let max = cfg.max_rounds;
    if plan.rounds_used < 1 || plan.rounds_used > max {
        out.push(PlanViolation::RoundsOutOfRange {
            rounds_used: plan.rounds_used,
            max_rounds: max,
        });
    }
    if plan.source_mode == SourceMode::Soft && plan.rounds_used != max {
        out.push(PlanViolation::SoftBeforeRoundLimit {
            rounds_used: plan.rounds_used,
            max_rounds: max,
        });
    }
    out
}

/// Step-level checks shared with the judge's plan parser.
pub(crate) fn check_steps(steps: &[PlanStep], cfg: &DebateConfig) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    if steps.is_empty() {
        out.push(PlanViolation::EmptySteps);
    }
    for (i, step) in steps.iter().enumerate() {
        for &d in &step.depends_on {
            if d >= i {
                out.push(PlanViolation::ForwardDependency {
                    step: i,
                    depends_on: d,
                });
            }
        }
        if !cfg.operator_pool.iter().any(|op| op.kind == step.operator) {
            out.push(PlanViolation::OperatorNotInPool {
                step: i,
                operator: step.operator,
            });
        }
    }
    out
}

/// Speaker roles, in their within-round speaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Affirmative,
    Negative,
    Fast,
    Slow,
    Judge,
}

impl Role {
    pub const DEBATERS: [Role; 4] = [Role::Affirmative, Role::Negative, Role::Fast, Role::Slow];

    pub fn tag(self) -> &'static str {
        match self {
            Role::Affirmative => "debate.affirmative",
            Role::Negative => "debate.negative",
            Role::Fast => "debate.fast",
            Role::Slow => "debate.slow",
            Role::Judge => "debate.judge",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub const ZERO: TokenUsage = TokenUsage {
        prompt_tokens: 0,
        completion_tokens: 0,
    };

    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage::new(
            self.prompt_tokens + rhs.prompt_tokens,
            self.completion_tokens + rhs.completion_tokens,
        )
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::ZERO, Add::add)
    }
}

/// One debate message. `speaker` distinguishes debaters sharing a role when
/// a side has more than one seat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub round: u32,
    pub role: Role,
    #[serde(default)]
    pub speaker: u32,
    pub content: String,
    pub usage: TokenUsage,
}

/// Ordered record of a debate with per-role histories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub question_id: String,
    pub utterances: Vec<Utterance>,
    pub histories: BTreeMap<Role, Vec<usize>>,
}

impl Transcript {
    pub fn new(question_id: impl Into<String>) -> Self {
        Self {
            question_id: question_id.into(),
            utterances: Vec::new(),
            histories: BTreeMap::new(),
        }
    }

    /// Rebuilds a transcript from its utterance list (e.g. read back from
    /// JSONL), recomputing the histories.
    pub fn from_utterances(question_id: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        let mut t = Self::new(question_id);
        for u in utterances {
            t.push(u);
        }
        t
    }

    pub fn push(&mut self, utterance: Utterance) -> usize {
        let idx = self.utterances.len();
        self.histories.entry(utterance.role).or_default().push(idx);
        self.utterances.push(utterance);
        idx
    }

    pub fn history(&self, role: Role) -> impl Iterator<Item = &Utterance> {
        self.histories
            .get(&role)
            .into_iter()
            .flatten()
            .map(|&i| &self.utterances[i])
    }

    /// Utterances of `role` spoken in `round`.
    pub fn in_round(&self, role: Role, round: u32) -> impl Iterator<Item = &Utterance> {
        self.history(role).filter(move |u| u.round == round)
    }

    pub fn rounds(&self) -> u32 {
        self.utterances.iter().map(|u| u.round).max().unwrap_or(0)
    }

    pub fn total_usage(&self) -> TokenUsage {
        self.utterances.iter().map(|u| u.usage).sum()
    }

    /// Checks that rounds never decrease and that within a round roles
    /// appear in speaking order, and that `histories` indexes exactly the
    /// utterances of each role.
    pub fn is_well_ordered(&self) -> bool {
        let ordered = self
            .utterances
            .windows(2)
            .all(|w| (w[0].round, w[0].role) <= (w[1].round, w[1].role));
        let mut expected: BTreeMap<Role, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            expected.entry(u.role).or_default().push(i);
        }
        ordered && expected == self.histories
    }
}
