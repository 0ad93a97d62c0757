//! Bi-level debate: two opposing first-level debaters, a fast and a slow
//! second-level debater, and a judge that turns the discussion into an
//! [`ExecutionPlan`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, CompletionRequest, Gateway, LlmError};
use crate::model::{
    check_steps, ExecutionPlan, Operator, OperatorKind, PlanStep, PlanViolation, Question,
    QuestionType, Role, SourceMode, TokenUsage, Transcript, Utterance,
};
use crate::operators::{AdaptiveRouting, OperatorFixtures};

/// Placeholder for inputs that do not exist yet (round 1).
pub const NULL_PLACEHOLDER: &str = "Null";
/// Token a hard-mode judge emits to request another round.
pub const CONTINUE_TOKEN: &str = "CONTINUE";
pub const JUDGE_REPAIR_TAG: &str = "debate.judge.repair";

pub const META_TEMPLATE: &str = include_str!("../templates/meta.txt");
pub const AFFIRMATIVE_TEMPLATE: &str = include_str!("../templates/affirmative.txt");
pub const NEGATIVE_TEMPLATE: &str = include_str!("../templates/negative.txt");
pub const FAST_TEMPLATE: &str = include_str!("../templates/fast.txt");
pub const SLOW_TEMPLATE: &str = include_str!("../templates/slow.txt");
pub const JUDGE_HARD_TEMPLATE: &str = include_str!("../templates/judge_hard.txt");
pub const JUDGE_SOFT_TEMPLATE: &str = include_str!("../templates/judge_soft.txt");
pub const PLAN_FORMAT_TEMPLATE: &str = include_str!("../templates/plan_format.txt");

/// Agreement pressure written into the meta prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DebateLevel {
    L0,
    L1,
    #[default]
    L2,
    L3,
}

impl DebateLevel {
    pub const ALL: [DebateLevel; 4] = [DebateLevel::L0, DebateLevel::L1, DebateLevel::L2, DebateLevel::L3];

    pub fn sentence(self) -> &'static str {
        match self {
            DebateLevel::L0 => "Both sides must reach a full consensus on every point of the debate. Each multi-hop operator selection must be agreed upon by both sides.",
            DebateLevel::L1 => "Most of the debate should be characterized by disagreements, but there may still be a small amount of consensus on less important operators selection based on question types.",
            DebateLevel::L2 => "It's not necessary to fully agree with each other's perspectives, as our objective is to find the correct execution plan of operators to answer the multi-hop question based on its type.",
            DebateLevel::L3 => "Both sides must disagree with each other on every point of the multi-hop QA operators debate. There should be no consensus whatsoever.",
        }
    }
}

impl fmt::Display for DebateLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for DebateLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().trim_start_matches('L') {
            "0" => Ok(DebateLevel::L0),
            "1" => Ok(DebateLevel::L1),
            "2" => Ok(DebateLevel::L2),
            "3" => Ok(DebateLevel::L3),
            _ => Err(format!("unknown debate level {s:?} (expected L0..L3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebateConfig {
    pub max_rounds: u32,
    /// Written into the meta prompt only; the engine runs one utterance per
    /// seat per round.
    pub turns_per_side_per_round: u32,
    pub first_level_debaters: u32,
    pub second_level_debaters: u32,
    pub level: DebateLevel,
    pub operator_pool: Vec<Operator>,
    pub debater_temperature: f64,
    pub judge_temperature: f64,
}

impl Default for DebateConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            turns_per_side_per_round: 2,
            first_level_debaters: 2,
            second_level_debaters: 2,
            level: DebateLevel::L2,
            operator_pool: OperatorFixtures::default().operator_pool(),
            debater_temperature: 0.7,
            judge_temperature: 0.0,
        }
    }
}

impl DebateConfig {
    pub fn validate(&self) -> Result<(), DebateError> {
        let bad = |m: String| Err(DebateError::InvalidConfig(m));
        if self.max_rounds < 1 {
            return bad("max_rounds must be at least 1".into());
        }
        if self.turns_per_side_per_round < 1 {
            return bad("turns_per_side_per_round must be at least 1".into());
        }
        if self.first_level_debaters < 2 || self.second_level_debaters < 2 {
            return bad("each debate level needs at least 2 debaters".into());
        }
        if self.operator_pool.is_empty() {
            return bad("operator pool is empty".into());
        }
        for t in [self.debater_temperature, self.judge_temperature] {
            if !t.is_finite() || t < 0.0 {
                return bad(format!("invalid temperature {t}"));
            }
        }
        Ok(())
    }

    /// Seats per role: affirmative/fast take the ceiling half of their
    /// level, negative/slow the floor half.
    pub fn seats(&self, role: Role) -> u32 {
        match role {
            Role::Affirmative => self.first_level_debaters.div_ceil(2),
            Role::Negative => self.first_level_debaters / 2,
            Role::Fast => self.second_level_debaters.div_ceil(2),
            Role::Slow => self.second_level_debaters / 2,
            Role::Judge => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DebateError {
    #[error("invalid debate config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("judge produced no plan: {0}")]
    PlanParseFailed(String),
    #[error("{role:?} turn out of order in round {round}")]
    OutOfOrder { role: Role, round: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateState {
    /// Current round, starting at 1.
    pub round: u32,
    pub transcript: Transcript,
    pub terminated: bool,
    pub plan: Option<ExecutionPlan>,
}

impl DebateState {
    pub fn new(question_id: impl Into<String>) -> Self {
        Self {
            round: 1,
            transcript: Transcript::new(question_id),
            terminated: false,
            plan: None,
        }
    }

    /// Same-round utterances of `role`, seat contents joined by blank lines;
    /// `Null` if there are none.
    pub fn round_view(&self, role: Role, round: u32) -> String {
        let parts: Vec<&str> = self
            .transcript
            .in_round(role, round)
            .map(|u| u.content.as_str())
            .collect();
        if parts.is_empty() {
            NULL_PLACEHOLDER.to_string()
        } else {
            parts.join("\n\n")
        }
    }

    /// All utterances of `role` before `round`, one `[Round k]` line block
    /// per utterance; `Null` if there are none.
    pub fn history_view(&self, role: Role, round: u32) -> String {
        let parts: Vec<String> = self
            .transcript
            .history(role)
            .filter(|u| u.round < round)
            .map(|u| format!("[Round {}] {}", u.round, u.content))
            .collect();
        if parts.is_empty() {
            NULL_PLACEHOLDER.to_string()
        } else {
            parts.join("\n")
        }
    }
}

/// Replaces every `<slot>` whose name is in `values`. Unknown `<...>`
/// spans are kept verbatim and substituted text is never rescanned.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('<') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('>') {
            Some(close) => {
                let name = &after[..close];
                match values.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('<');
                        out.push_str(name);
                        out.push('>');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Slot names referenced in `template`.
pub fn template_slots(template: &str) -> Vec<String> {
    let mut slots = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('<') {
        let after = &rest[open + 1..];
        let Some(close) = after.find('>') else { break };
        slots.push(after[..close].to_string());
        rest = &after[close + 1..];
    }
    slots
}

pub fn number_word(n: u32) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS
        .get(n as usize)
        .map(|w| w.to_string())
        .unwrap_or_else(|| n.to_string())
}

fn ordinal(n: u32) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

fn plural(n: u32, word: &str) -> String {
    if n == 1 {
        format!("{} {word}", number_word(n))
    } else {
        format!("{} {word}s", number_word(n))
    }
}

pub fn format_operator_pool(pool: &[Operator]) -> String {
    pool.iter()
        .enumerate()
        .map(|(i, op)| format!("({}) {}: {}", i + 1, op.kind, op.description.trim()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn assemble_meta_prompt(
    cfg: &DebateConfig,
    q_type: &QuestionType,
    _question: &Question,
) -> Result<String, DebateError> {
    cfg.validate()?;
    let (ad, nd) = (cfg.seats(Role::Affirmative), cfg.seats(Role::Negative));
    let arrangement = if ad == nd {
        format!("Both sides have {} debater each", number_word(ad))
    } else {
        format!(
            "The affirmative side has {} and the negative side has {}",
            plural(ad, "debater"),
            plural(nd, "debater")
        )
    };
    let pool = format_operator_pool(&cfg.operator_pool);
    let turns = number_word(cfg.turns_per_side_per_round);
    let rounds = number_word(cfg.max_rounds);
    Ok(fill_template(
        META_TEMPLATE,
        &[
            ("debate level", cfg.level.sentence()),
            ("operators pool", &pool),
            ("question type", q_type.as_str()),
            ("debater arrangement", &arrangement),
            ("turns", &turns),
            ("max rounds", &rounds),
        ],
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgeDecision {
    Continue,
    Stop(ExecutionPlan),
}

/// One debate: fixed question, type, configuration and backend.
pub struct Debate<'a> {
    pub cfg: &'a DebateConfig,
    pub gateway: &'a Gateway,
    pub question: &'a Question,
    pub q_type: QuestionType,
    pub routing: &'a AdaptiveRouting,
    meta: String,
}

impl<'a> Debate<'a> {
    pub fn new(
        cfg: &'a DebateConfig,
        gateway: &'a Gateway,
        question: &'a Question,
        q_type: QuestionType,
        routing: &'a AdaptiveRouting,
    ) -> Result<Self, DebateError> {
        let meta = assemble_meta_prompt(cfg, &q_type, question)?;
        Ok(Self {
            cfg,
            gateway,
            question,
            q_type,
            routing,
            meta,
        })
    }

    pub fn meta_prompt(&self) -> &str {
        &self.meta
    }

    fn messages(&self, state: &DebateState, seat_line: Option<String>, body: String) -> Vec<ChatMessage> {
        let mut user = format!(
            "Question: {}\nCurrent round: {} of {}\n\n",
            self.question.text.trim(),
            state.round,
            self.cfg.max_rounds
        );
        if let Some(line) = seat_line {
            user.push_str(&line);
            user.push('\n');
        }
        user.push_str(&body);
        vec![ChatMessage::system(self.meta.clone()), ChatMessage::user(user)]
    }

    fn check_order(&self, state: &DebateState, role: Role) -> Result<(), DebateError> {
        let t = state.round;
        let ok = !state.terminated
            && t <= self.cfg.max_rounds
            && state.transcript.in_round(role, t).next().is_none()
            && Role::DEBATERS
                .iter()
                .take_while(|r| **r != role)
                .all(|r| state.transcript.in_round(*r, t).next().is_some());
        if ok {
            Ok(())
        } else {
            Err(DebateError::OutOfOrder { role, round: t })
        }
    }

    /// Prompt body of `role` at the current round, before the seat line.
    pub fn role_prompt(&self, state: &DebateState, role: Role) -> String {
        let t = state.round;
        let prev = t.saturating_sub(1);
        let th = ordinal(t);
        match role {
            Role::Affirmative => fill_template(
                AFFIRMATIVE_TEMPLATE,
                &[
                    ("H_ad", &state.history_view(Role::Affirmative, t)),
                    ("f_fast", &state.round_view(Role::Fast, prev)),
                    ("f_slow", &state.round_view(Role::Slow, prev)),
                ],
            ),
            Role::Negative => fill_template(
                NEGATIVE_TEMPLATE,
                &[
                    ("H_nd", &state.history_view(Role::Negative, t)),
                    ("f_ad", &state.round_view(Role::Affirmative, t)),
                    ("f_fast", &state.round_view(Role::Fast, prev)),
                    ("f_slow", &state.round_view(Role::Slow, prev)),
                ],
            ),
            Role::Fast => fill_template(
                FAST_TEMPLATE,
                &[
                    ("t-th", &th),
                    ("f_ad", &state.round_view(Role::Affirmative, t)),
                    ("f_nd", &state.round_view(Role::Negative, t)),
                    ("H_fast", &state.history_view(Role::Fast, t)),
                ],
            ),
            Role::Slow => fill_template(
                SLOW_TEMPLATE,
                &[
                    ("t-th", &th),
                    ("f_ad", &state.round_view(Role::Affirmative, t)),
                    ("f_nd", &state.round_view(Role::Negative, t)),
                    ("f_fast", &state.round_view(Role::Fast, t)),
                    ("H_slow", &state.history_view(Role::Slow, t)),
                ],
            ),
            Role::Judge => {
                let names: Vec<&str> = self.cfg.operator_pool.iter().map(|o| o.kind.name()).collect();
                let format = fill_template(PLAN_FORMAT_TEMPLATE, &[("operator names", &names.join(", "))]);
                let body = if t < self.cfg.max_rounds {
                    fill_template(
                        JUDGE_HARD_TEMPLATE,
                        &[
                            ("t", &t.to_string()),
                            ("f_ad", &state.round_view(Role::Affirmative, t)),
                            ("f_nd", &state.round_view(Role::Negative, t)),
                            ("f_fast", &state.round_view(Role::Fast, t)),
                            ("f_slow", &state.round_view(Role::Slow, t)),
                            ("question type", self.q_type.as_str()),
                        ],
                    )
                } else {
                    fill_template(
                        JUDGE_SOFT_TEMPLATE,
                        &[
                            ("question type", self.q_type.as_str()),
                            ("H_slow", &state.history_view(Role::Slow, t + 1)),
                        ],
                    )
                };
                format!("{body}\n{format}")
            }
        }
    }

    fn debater_turn(&self, state: &mut DebateState, role: Role) -> Result<Utterance, DebateError> {
        self.check_order(state, role)?;
        let seats = self.cfg.seats(role);
        let body = self.role_prompt(state, role);
        let mut last = None;
        for seat in 0..seats {
            let seat_line = (seats > 1).then(|| {
                format!("You hold seat {} of {} on this side.", seat + 1, seats)
            });
            let resp = self.gateway.complete(&CompletionRequest::new(
                role.tag(),
                self.messages(state, seat_line, body.clone()),
                self.cfg.debater_temperature,
            ))?;
            let u = Utterance {
                round: state.round,
                role,
                speaker: seat,
                content: resp.content,
                usage: resp.usage,
            };
            state.transcript.push(u.clone());
            last = Some(u);
        }
        Ok(last.expect("every role has at least one seat"))
    }

    /// f_ad^t from H_ad^{t-1}, f_fast^{t-1}, f_slow^{t-1}.
    pub fn affirmative_turn(&self, state: &mut DebateState) -> Result<Utterance, DebateError> {
        self.debater_turn(state, Role::Affirmative)
    }

    /// f_nd^t from H_nd^{t-1}, f_ad^t, f_fast^{t-1}, f_slow^{t-1}.
    pub fn negative_turn(&self, state: &mut DebateState) -> Result<Utterance, DebateError> {
        self.debater_turn(state, Role::Negative)
    }

    /// f_fast^t from f_ad^t, f_nd^t, H_fast^{t-1}.
    pub fn fast_turn(&self, state: &mut DebateState) -> Result<Utterance, DebateError> {
        self.debater_turn(state, Role::Fast)
    }

    /// f_slow^t from f_ad^t, f_nd^t, f_fast^t, H_slow^{t-1}.
    pub fn slow_turn(&self, state: &mut DebateState) -> Result<Utterance, DebateError> {
        self.debater_turn(state, Role::Slow)
    }

    fn judge_call(
        &self,
        state: &mut DebateState,
        tag: &str,
        messages: Vec<ChatMessage>,
    ) -> Result<String, DebateError> {
        let resp = self.gateway.complete(&CompletionRequest::new(
            tag,
            messages,
            self.cfg.judge_temperature,
        ))?;
        state.transcript.push(Utterance {
            round: state.round,
            role: Role::Judge,
            speaker: 0,
            content: resp.content.clone(),
            usage: resp.usage,
        });
        Ok(resp.content)
    }

    /// Hard mode before the last round (plan or `CONTINUE`), soft mode at
    /// the last round (always a plan: parse, one repair attempt, then the
    /// adaptive default for the question type).
    pub fn judge_decide(&self, state: &mut DebateState) -> Result<JudgeDecision, DebateError> {
        if state.terminated
            || !Role::DEBATERS
                .iter()
                .all(|r| state.transcript.in_round(*r, state.round).next().is_some())
        {
            return Err(DebateError::OutOfOrder {
                role: Role::Judge,
                round: state.round,
            });
        }
        let t = state.round;
        let messages = self.messages(state, None, self.role_prompt(state, Role::Judge));
        let content = self.judge_call(state, Role::Judge.tag(), messages.clone())?;

        if t < self.cfg.max_rounds {
            if contains_continue(&content) {
                return Ok(JudgeDecision::Continue);
            }
            return Ok(match parse_plan(&content, self.cfg) {
                Ok(parsed) => JudgeDecision::Stop(self.finish(state, parsed, SourceMode::Hard)),
                Err(e) => {
                    log::info!("round {t}: judge output is not a plan ({e}); continuing");
                    JudgeDecision::Continue
                }
            });
        }

        let err = match parse_plan(&content, self.cfg) {
            Ok(parsed) => return Ok(JudgeDecision::Stop(self.finish(state, parsed, SourceMode::Soft))),
            Err(e) => e,
        };
        let mut repair = messages;
        repair.push(ChatMessage::assistant(content));
        repair.push(ChatMessage::user(format!(
            "Your reply could not be used as a plan ({err}). Reply with only the fenced JSON plan."
        )));
        let retry = self.judge_call(state, JUDGE_REPAIR_TAG, repair)?;
        let parsed = match parse_plan(&retry, self.cfg) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("soft-mode judge failed twice ({e}); using the default plan for {}", self.q_type);
                let steps: Vec<PlanStep> = self.routing.route(&self.q_type).plan_steps();
                let steps = if check_steps(&steps, self.cfg).is_empty() {
                    steps
                } else {
                    let first = self.cfg.operator_pool[0].kind;
                    vec![PlanStep::new(first, "Answer the question.")]
                };
                ParsedPlan {
                    steps,
                    rationale: format!("default plan for question type {}", self.q_type),
                }
            }
        };
        Ok(JudgeDecision::Stop(self.finish(state, parsed, SourceMode::Soft)))
    }

    fn finish(&self, state: &mut DebateState, parsed: ParsedPlan, mode: SourceMode) -> ExecutionPlan {
        let plan = ExecutionPlan {
            steps: parsed.steps,
            source_mode: mode,
            judge_rationale: parsed.rationale,
            rounds_used: state.round,
        };
        state.terminated = true;
        state.plan = Some(plan.clone());
        plan
    }

    /// Runs rounds until the judge stops.
    pub fn run(&self) -> Result<(ExecutionPlan, Transcript), DebateError> {
        let mut state = DebateState::new(self.question.id.clone());
        loop {
            self.affirmative_turn(&mut state)?;
            self.negative_turn(&mut state)?;
            self.fast_turn(&mut state)?;
            self.slow_turn(&mut state)?;
            match self.judge_decide(&mut state)? {
                JudgeDecision::Stop(plan) => return Ok((plan, state.transcript)),
                JudgeDecision::Continue => state.round += 1,
            }
        }
    }
}

pub fn run_debate(
    question: &Question,
    q_type: &QuestionType,
    cfg: &DebateConfig,
    gateway: &Gateway,
    routing: &AdaptiveRouting,
) -> Result<(ExecutionPlan, Transcript), DebateError> {
    Debate::new(cfg, gateway, question, q_type.clone(), routing)?.run()
}

fn contains_continue(text: &str) -> bool {
    text.split(|c: char| !c.is_ascii_alphanumeric() && c != '_')
        .any(|w| w == CONTINUE_TOKEN)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPlan {
    pub steps: Vec<PlanStep>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanParseError {
    #[error("no plan found")]
    NoPlan,
    #[error("unknown operator {0:?}")]
    UnknownOperator(String),
    #[error("invalid plan: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<PlanViolation>),
}

#[derive(Deserialize)]
struct RawPlan {
    steps: Vec<RawStep>,
    #[serde(default)]
    rationale: Option<String>,
}

#[derive(Deserialize)]
struct RawStep {
    operator: String,
    #[serde(default)]
    directive: Option<String>,
    #[serde(default)]
    depends_on: Vec<usize>,
}

/// Parses a judge reply: a (fenced) JSON object first, then a numbered
/// list where each line maps to its first named operator and depends on
/// the previous line.
pub fn parse_plan(text: &str, cfg: &DebateConfig) -> Result<ParsedPlan, PlanParseError> {
    let parsed = match parse_json_plan(text) {
        Some(r) => r?,
        None => parse_numbered_plan(text).ok_or(PlanParseError::NoPlan)?,
    };
    let violations = check_steps(&parsed.steps, cfg);
    if violations.is_empty() {
        Ok(parsed)
    } else {
        Err(PlanParseError::Invalid(violations))
    }
}

fn json_candidates(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let body = &rest[start + 3..];
        let Some(end) = body.find("```") else { break };
        let block = &body[..end];
        let block = block.strip_prefix("json").unwrap_or(block);
        out.push(block.trim());
        rest = &body[end + 3..];
    }
    if let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) {
        if a < b {
            out.push(&text[a..=b]);
        }
    }
    out
}

fn parse_json_plan(text: &str) -> Option<Result<ParsedPlan, PlanParseError>> {
    let raw = json_candidates(text)
        .into_iter()
        .find_map(|c| serde_json::from_str::<RawPlan>(c).ok())?;
    let mut steps = Vec::with_capacity(raw.steps.len());
    for s in raw.steps {
        let Some(op) = OperatorKind::parse_lenient(&s.operator) else {
            return Some(Err(PlanParseError::UnknownOperator(s.operator)));
        };
        steps.push(PlanStep {
            operator: op,
            directive: s.directive.unwrap_or_default(),
            depends_on: s.depends_on,
        });
    }
    Some(Ok(ParsedPlan {
        steps,
        rationale: raw.rationale.unwrap_or_else(|| text.trim().to_string()),
    }))
}

const OPERATOR_ALIASES: &[(&str, OperatorKind)] = &[
    ("chain-of-thought", OperatorKind::CoT),
    ("chain of thought", OperatorKind::CoT),
    ("cot", OperatorKind::CoT),
    ("single-step", OperatorKind::SingleStep),
    ("single step", OperatorKind::SingleStep),
    ("singlestep", OperatorKind::SingleStep),
    ("iterative-step", OperatorKind::IterativeStep),
    ("iterative step", OperatorKind::IterativeStep),
    ("iterativestep", OperatorKind::IterativeStep),
    ("ircot", OperatorKind::IterativeStep),
    ("sub-step", OperatorKind::SubStep),
    ("sub step", OperatorKind::SubStep),
    ("substep", OperatorKind::SubStep),
    ("self-ask", OperatorKind::SubStep),
    ("self ask", OperatorKind::SubStep),
    ("adaptive-step", OperatorKind::AdaptiveStep),
    ("adaptive step", OperatorKind::AdaptiveStep),
    ("adaptivestep", OperatorKind::AdaptiveStep),
];

/// Earliest operator name mentioned in `line`, on word boundaries.
pub fn first_operator_mention(line: &str) -> Option<OperatorKind> {
    let lower = line.to_lowercase();
    let bytes = lower.as_bytes();
    let boundary = |i: usize| i >= bytes.len() || !bytes[i].is_ascii_alphanumeric();
    let mut best: Option<(usize, usize, OperatorKind)> = None;
    for (alias, kind) in OPERATOR_ALIASES {
        let mut from = 0;
        while let Some(pos) = lower[from..].find(alias) {
            let at = from + pos;
            let end = at + alias.len();
            if (at == 0 || boundary(at - 1)) && boundary(end) {
                let better = match best {
                    None => true,
                    Some((p, len, _)) => at < p || (at == p && alias.len() > len),
                };
                if better {
                    best = Some((at, alias.len(), *kind));
                }
                break;
            }
            from = at + 1;
        }
    }
    best.map(|(_, _, k)| k)
}

fn parse_numbered_plan(text: &str) -> Option<ParsedPlan> {
    let mut steps: Vec<PlanStep> = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim_start();
        let digits = trimmed.chars().take_while(char::is_ascii_digit).count();
        if digits == 0 {
            continue;
        }
        let rest = &trimmed[digits..];
        let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) else {
            continue;
        };
        let Some(op) = first_operator_mention(rest) else {
            continue;
        };
        let idx = steps.len();
        let step = PlanStep::new(op, rest.trim());
        steps.push(if idx == 0 { step } else { step.after([idx - 1]) });
    }
    (!steps.is_empty()).then(|| ParsedPlan {
        steps,
        rationale: text.trim().to_string(),
    })
}

/// One utterance per line.
pub fn transcript_to_jsonl(transcript: &Transcript) -> String {
    let mut out = String::new();
    for u in &transcript.utterances {
        out.push_str(&serde_json::to_string(u).expect("utterance serializes"));
        out.push('\n');
    }
    out
}

pub fn transcript_from_jsonl(question_id: &str, text: &str) -> Result<Transcript, serde_json::Error> {
    let utterances = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<Utterance>, _>>()?;
    Ok(Transcript::from_utterances(question_id, utterances))
}

/// Usage per role across the transcript.
pub fn usage_by_role(transcript: &Transcript) -> BTreeMap<Role, TokenUsage> {
    let mut out = BTreeMap::new();
    for u in &transcript.utterances {
        *out.entry(u.role).or_insert(TokenUsage::ZERO) += u.usage;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockRule};
    use std::sync::Arc;

    const PLAN_JSON: &str = "```json\n{\"steps\":[{\"operator\":\"SubStep\",\"directive\":\"decompose\",\"depends_on\":[]},{\"operator\":\"IterativeStep\",\"directive\":\"answer\",\"depends_on\":[0]}],\"rationale\":\"inference needs multi-round retrieval\"}\n```";

    fn q() -> Question {
        Question::new("q1", "Where is the director of Big Stone Gap based?")
    }

    fn debaters() -> Vec<MockRule> {
        Role::DEBATERS
            .iter()
            .map(|r| MockRule::new(r.tag(), format!("{r:?} view")))
            .collect()
    }

    fn run(rules: Vec<MockRule>, cfg: &DebateConfig) -> (ExecutionPlan, Transcript, Arc<MockBackend>) {
        let mock = Arc::new(MockBackend::new(rules));
        let gw = Gateway::new(mock.clone());
        let routing = AdaptiveRouting::default();
        let (plan, t) = run_debate(&q(), &QuestionType::new("Inference"), cfg, &gw, &routing).unwrap();
        (plan, t, mock)
    }

    #[test]
    fn default_meta_prompt_matches_table_text() {
        let cfg = DebateConfig::default();
        let meta = assemble_meta_prompt(&cfg, &QuestionType::new("Inference"), &q()).unwrap();
        assert!(meta.starts_with("You are a debater. Hello and welcome to the debate competition. It's not necessary to fully agree"));
        assert!(meta.contains("The question type is stated as follows: Inference."));
        assert!(meta.contains("Both sides have one debater each and each round can be discussed up to two times. We set the maximum number of debate round is three times."));
        let pool = meta.find("(1) CoT:").unwrap();
        assert!(meta.find("It's not necessary").unwrap() < pool);
        assert!(pool < meta.find("Inference").unwrap());
    }

    #[test]
    fn level_sentences() {
        let cfg = DebateConfig { level: DebateLevel::L3, ..Default::default() };
        let meta = assemble_meta_prompt(&cfg, &QuestionType::null(), &q()).unwrap();
        assert!(meta.contains("must disagree with each other on every point"));
        assert!(!meta.contains("It's not necessary"));
        assert_eq!("l1".parse::<DebateLevel>().unwrap(), DebateLevel::L1);
        assert_eq!("3".parse::<DebateLevel>().unwrap(), DebateLevel::L3);
        assert!("L9".parse::<DebateLevel>().is_err());
    }

    #[test]
    fn uneven_seats_are_described() {
        let cfg = DebateConfig {
            first_level_debaters: 3,
            ..DebateConfig::default()
        };
        assert_eq!(cfg.seats(Role::Affirmative), 2);
        assert_eq!(cfg.seats(Role::Negative), 1);
        let meta = assemble_meta_prompt(&cfg, &QuestionType::null(), &q()).unwrap();
        assert!(meta.contains("The affirmative side has two debaters and the negative side has one debater"));
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            DebateConfig { max_rounds: 0, ..DebateConfig::default() },
            DebateConfig { first_level_debaters: 1, ..DebateConfig::default() },
            DebateConfig { operator_pool: vec![], ..DebateConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(DebateError::InvalidConfig(_))));
        }
    }

    #[test]
    fn fill_template_is_single_pass() {
        let out = fill_template("<a> and <b> and <c>", &[("a", "<b>"), ("b", "B")]);
        assert_eq!(out, "<b> and B and <c>");
        assert_eq!(template_slots("x <H_ad> y <f_fast>"), vec!["H_ad", "f_fast"]);
    }

    #[test]
    fn hard_stop_in_round_one() {
        let mut rules = debaters();
        rules.push(MockRule::new("debate.judge", PLAN_JSON));
        let (plan, t, _) = run(rules, &DebateConfig::default());
        assert_eq!(plan.rounds_used, 1);
        assert_eq!(plan.source_mode, SourceMode::Hard);
        assert_eq!(plan.operators(), vec![OperatorKind::SubStep, OperatorKind::IterativeStep]);
        assert_eq!(plan.judge_rationale, "inference needs multi-round retrieval");
        assert_eq!(t.utterances.len(), 5);
    }

    #[test]
    fn two_round_debate_has_ten_utterances() {
        let mut rules = debaters();
        rules.push(MockRule::new("debate.judge", PLAN_JSON).containing("Current round: 2"));
        rules.push(MockRule::new("debate.judge", "CONTINUE"));
        let (plan, t, _) = run(rules, &DebateConfig::default());
        assert_eq!(plan.rounds_used, 2);
        assert_eq!(t.utterances.len(), 10);
        assert_eq!(t.history(Role::Judge).count(), 2);
        assert_eq!(t.history(Role::Negative).count(), 2);
        assert!(t.is_well_ordered());
    }

    #[test]
    fn never_satisfied_judge_goes_soft_at_limit() {
        for r in 1..=3 {
            let mut rules = debaters();
            rules.push(MockRule::new("debate.judge", PLAN_JSON).containing("You must end the discussion"));
            rules.push(MockRule::new("debate.judge", "CONTINUE"));
            let cfg = DebateConfig { max_rounds: r, ..DebateConfig::default() };
            let (plan, t, _) = run(rules, &cfg);
            assert_eq!(plan.rounds_used, r);
            assert_eq!(plan.source_mode, SourceMode::Soft);
            assert_eq!(t.history(Role::Slow).count() as u32, r);
        }
    }

    #[test]
    fn soft_mode_repairs_then_falls_back() {
        let mut rules = debaters();
        rules.push(MockRule::new("debate.judge.repair", "still no plan"));
        rules.push(MockRule::new("debate.judge", "CONTINUE"));
        let (plan, t, _) = run(rules, &DebateConfig::default());
        assert_eq!(plan.source_mode, SourceMode::Soft);
        assert_eq!(plan.operators(), vec![OperatorKind::SubStep, OperatorKind::IterativeStep]);
        assert_eq!(t.history(Role::Judge).count(), 4);

        let mut rules = debaters();
        rules.push(MockRule::new("debate.judge.repair", PLAN_JSON));
        rules.push(MockRule::new("debate.judge", "CONTINUE"));
        let (plan, _, mock) = run(rules, &DebateConfig::default());
        assert_eq!(plan.judge_rationale, "inference needs multi-round retrieval");
        assert_eq!(mock.requests().iter().filter(|r| r.tag == JUDGE_REPAIR_TAG).count(), 1);
    }

    #[test]
    fn round_one_uses_null_placeholders_and_round_two_embeds_outputs() {
        let mut rules = vec![
            MockRule::new("debate.fast", "FAST-R1").containing("Current round: 1"),
            MockRule::new("debate.slow", "SLOW-R1").containing("Current round: 1"),
        ];
        rules.extend(debaters());
        rules.push(MockRule::new("debate.judge", "CONTINUE"));
        rules.push(MockRule::new(JUDGE_REPAIR_TAG, PLAN_JSON));
        let cfg = DebateConfig { max_rounds: 2, ..DebateConfig::default() };
        let (_, _, mock) = run(rules, &cfg);
        let reqs = mock.requests();
        let aff: Vec<_> = reqs.iter().filter(|r| r.tag == "debate.affirmative").collect();
        assert!(aff[0].last_user().unwrap().contains("results of yourself are Null. The previous round state of fast and slow debaters are summarized as Null and Null"));
        let second = aff[1].last_user().unwrap();
        assert!(second.contains("summarized as FAST-R1 and SLOW-R1 respectively"));
        assert!(second.contains("[Round 1] Affirmative view"));
        let fast2 = reqs.iter().filter(|r| r.tag == "debate.fast").nth(1).unwrap();
        assert!(!fast2.last_user().unwrap().contains("SLOW-R1"));
        assert!(fast2.last_user().unwrap().contains("[Round 1] FAST-R1"));
    }

    #[test]
    fn parse_plan_variants() {
        let cfg = DebateConfig::default();
        let p = parse_plan("1. Use sub-step decomposition with single-step answers\n2. Then IRCoT to finish", &cfg).unwrap();
        assert_eq!(p.steps.len(), 2);
        assert_eq!(p.steps[0].operator, OperatorKind::SubStep);
        assert_eq!(p.steps[1].operator, OperatorKind::IterativeStep);
        assert_eq!(p.steps[1].depends_on, vec![0]);

        let bare = r#"Plan: {"steps":[{"operator":"cot"}]}"#;
        assert_eq!(parse_plan(bare, &cfg).unwrap().steps[0].operator, OperatorKind::CoT);

        let fwd = r#"{"steps":[{"operator":"CoT","depends_on":[1]},{"operator":"CoT"}]}"#;
        assert!(matches!(parse_plan(fwd, &cfg), Err(PlanParseError::Invalid(_))));
        assert!(matches!(
            parse_plan(r#"{"steps":[{"operator":"Magic"}]}"#, &cfg),
            Err(PlanParseError::UnknownOperator(_))
        ));
        assert_eq!(parse_plan("no idea", &cfg), Err(PlanParseError::NoPlan));
        assert!(matches!(parse_plan(r#"{"steps":[]}"#, &cfg), Err(PlanParseError::Invalid(_))));
    }

    #[test]
    fn operator_mentions_respect_word_boundaries() {
        assert_eq!(first_operator_mention("Scotland via cot"), Some(OperatorKind::CoT));
        assert_eq!(first_operator_mention("nothing here"), None);
        assert_eq!(
            first_operator_mention("adaptive-step then single-step"),
            Some(OperatorKind::AdaptiveStep)
        );
    }

    #[test]
    fn continue_token_is_a_whole_word() {
        assert!(contains_continue("CONTINUE"));
        assert!(contains_continue("Decision: CONTINUE."));
        assert!(!contains_continue("CONTINUED"));
        assert!(!contains_continue("continue"));
    }

    #[test]
    fn transcript_jsonl_round_trip() {
        let mut rules = debaters();
        rules.push(MockRule::new("debate.judge", PLAN_JSON));
        let (_, t, _) = run(rules, &DebateConfig::default());
        let text = transcript_to_jsonl(&t);
        assert_eq!(text.lines().count(), 5);
        assert_eq!(transcript_from_jsonl("q1", &text).unwrap(), t);
    }

    #[test]
    fn turns_out_of_order_are_rejected() {
        let mock = Arc::new(MockBackend::new(debaters()));
        let gw = Gateway::new(mock);
        let cfg = DebateConfig::default();
        let routing = AdaptiveRouting::default();
        let question = q();
        let d = Debate::new(&cfg, &gw, &question, QuestionType::null(), &routing).unwrap();
        let mut s = DebateState::new("q1");
        assert!(matches!(d.fast_turn(&mut s), Err(DebateError::OutOfOrder { .. })));
        d.affirmative_turn(&mut s).unwrap();
        assert!(matches!(d.affirmative_turn(&mut s), Err(DebateError::OutOfOrder { .. })));
        assert!(matches!(d.judge_decide(&mut s), Err(DebateError::OutOfOrder { .. })));
    }
}
