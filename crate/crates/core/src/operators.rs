//! The five reasoning operators, each a "question in, answer + evidence
//! out" procedure over the gateway and an optional retriever.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, CompletionRequest, Gateway, LlmError};
use crate::model::{
    Operator, OperatorKind, PlanStep, QuestionType, TokenUsage, COMPARISON, INFERENCE, NULL,
    TEMPORAL,
};
use crate::retrieval::{Document, RetrievalError, Retriever};

/// Marker closing a chain-of-thought or single-step answer.
pub const ANSWER_MARKER: &str = "Answer:";
/// Marker closing decomposition and iterative answers.
pub const FINAL_ANSWER_MARKER: &str = "So the final answer is:";
pub const FOLLOW_UP_MARKER: &str = "Follow up:";
pub const INTERMEDIATE_MARKER: &str = "Intermediate answer:";

const COT_DEMOS: &str = include_str!("../fixtures/cot_demos.json");
const SELF_ASK_DEMOS: &str = include_str!("../fixtures/self_ask_demos.json");
const OPERATOR_POOL: &str = include_str!("../fixtures/operator_pool.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorBudget {
    /// Cap on decomposition / retrieve-and-reason loop iterations.
    pub max_iterations: u32,
    /// Documents per retrieval call.
    pub k_docs: usize,
}

impl Default for OperatorBudget {
    fn default() -> Self {
        Self {
            max_iterations: 4,
            k_docs: 5,
        }
    }
}

impl OperatorBudget {
    pub const MIN_K: usize = 3;
    pub const MAX_K: usize = 10;

    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations < 1 {
            return Err("max_iterations must be at least 1".into());
        }
        if !(Self::MIN_K..=Self::MAX_K).contains(&self.k_docs) {
            return Err(format!(
                "k_docs {} outside [{}, {}]",
                self.k_docs,
                Self::MIN_K,
                Self::MAX_K
            ));
        }
        Ok(())
    }

    /// `k` clamped into the supported candidate-document range.
    pub fn with_k(mut self, k: usize) -> Self {
        self.k_docs = k.clamp(Self::MIN_K, Self::MAX_K);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotDemo {
    pub question_type: String,
    pub question: String,
    pub reasoning: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfAskStep {
    pub follow_up: String,
    pub intermediate_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfAskDemo {
    pub question: String,
    pub steps: Vec<SelfAskStep>,
    pub answer: String,
}

/// Demonstrations and operator descriptions used in prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorFixtures {
    pub cot_demos: Vec<CotDemo>,
    pub self_ask_demos: Vec<SelfAskDemo>,
    pub pool: BTreeMap<OperatorKind, String>,
}

impl Default for OperatorFixtures {
    fn default() -> Self {
        Self {
            cot_demos: serde_json::from_str(COT_DEMOS).expect("bundled CoT demos"),
            self_ask_demos: serde_json::from_str(SELF_ASK_DEMOS).expect("bundled self-ask demos"),
            pool: serde_json::from_str(OPERATOR_POOL).expect("bundled operator pool"),
        }
    }
}

impl OperatorFixtures {
    pub fn operator_pool(&self) -> Vec<Operator> {
        OperatorKind::ALL
            .iter()
            .filter_map(|k| {
                self.pool.get(k).map(|d| Operator {
                    kind: *k,
                    description: d.clone(),
                })
            })
            .collect()
    }
}

/// How a sub-question produced by decomposition is answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeafMode {
    ClosedBook,
    SingleStep,
    IterativeStep,
}

impl LeafMode {
    pub fn for_operator(kind: OperatorKind) -> Option<LeafMode> {
        match kind {
            OperatorKind::SingleStep => Some(LeafMode::SingleStep),
            OperatorKind::IterativeStep => Some(LeafMode::IterativeStep),
            _ => None,
        }
    }
}

/// Target of the adaptive-step router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    CoT,
    SubStep(LeafMode),
}

impl Route {
    fn describe(self) -> &'static str {
        match self {
            Route::CoT => "CoT (closed book)",
            Route::SubStep(LeafMode::ClosedBook) => "SubStep + closed-book answers",
            Route::SubStep(LeafMode::SingleStep) => "SubStep + SingleStep",
            Route::SubStep(LeafMode::IterativeStep) => "SubStep + IterativeStep",
        }
    }

    /// The equivalent explicit plan.
    pub fn plan_steps(self) -> Vec<PlanStep> {
        match self {
            Route::CoT => vec![PlanStep::new(
                OperatorKind::CoT,
                "Answer directly from internal knowledge, reasoning step by step.",
            )],
            Route::SubStep(LeafMode::ClosedBook) => vec![PlanStep::new(
                OperatorKind::SubStep,
                "Decompose the question into sub-questions and answer each one.",
            )],
            Route::SubStep(leaf) => {
                let op = match leaf {
                    LeafMode::SingleStep => OperatorKind::SingleStep,
                    _ => OperatorKind::IterativeStep,
                };
                vec![
                    PlanStep::new(
                        OperatorKind::SubStep,
                        format!("Decompose the question into sub-questions and answer each with {op} retrieval."),
                    ),
                    PlanStep::new(
                        op,
                        format!("Answer the original question with {op} retrieval, using the sub-answers."),
                    )
                    .after([0]),
                ]
            }
        }
    }
}

/// Static question-type to operator map used by the adaptive-step operator
/// and by the judge's fallback plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptiveRouting {
    pub routes: BTreeMap<String, Route>,
    /// Route for labels missing from `routes`.
    pub default: Route,
}

impl Default for AdaptiveRouting {
    fn default() -> Self {
        let routes = BTreeMap::from([
            (NULL.to_string(), Route::CoT),
            (COMPARISON.to_string(), Route::SubStep(LeafMode::SingleStep)),
            (TEMPORAL.to_string(), Route::SubStep(LeafMode::SingleStep)),
            (INFERENCE.to_string(), Route::SubStep(LeafMode::IterativeStep)),
        ]);
        Self {
            routes,
            default: Route::SubStep(LeafMode::IterativeStep),
        }
    }
}

impl AdaptiveRouting {
    pub fn route(&self, q_type: &QuestionType) -> Route {
        self.routes
            .get(q_type.as_str())
            .copied()
            .unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubResult {
    pub question: String,
    pub outcome: OperatorOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorOutcome {
    pub operator: OperatorKind,
    pub answer: String,
    pub reasoning: String,
    /// Deduplicated, in order of first retrieval.
    pub retrieved_doc_ids: Vec<String>,
    /// Every query sent to the retriever, including those of sub-results.
    pub retrieval_queries: Vec<String>,
    pub sub_results: Vec<SubResult>,
    pub usage: TokenUsage,
    /// Gateway calls made, including nested ones.
    pub calls: u32,
    /// Loop iterations for decomposition and iterative retrieval.
    pub iterations: u32,
    /// True when the answer came from an explicit answer marker.
    pub answer_marked: bool,
    pub budget_exhausted: bool,
    /// True when retrieval was unavailable and the operator fell back to
    /// closed-book prompting.
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_note: Option<String>,
}

impl OperatorOutcome {
    fn new(operator: OperatorKind) -> Self {
        Self {
            operator,
            answer: String::new(),
            reasoning: String::new(),
            retrieved_doc_ids: Vec::new(),
            retrieval_queries: Vec::new(),
            sub_results: Vec::new(),
            usage: TokenUsage::ZERO,
            calls: 0,
            iterations: 0,
            answer_marked: false,
            budget_exhausted: false,
            degraded: false,
            routing_note: None,
        }
    }

    fn charge(&mut self, usage: TokenUsage) {
        self.usage += usage;
        self.calls += 1;
    }

    fn add_doc_ids(&mut self, ids: impl IntoIterator<Item = String>) {
        for id in ids {
            if !self.retrieved_doc_ids.contains(&id) {
                self.retrieved_doc_ids.push(id);
            }
        }
    }

    /// Folds a nested outcome's usage and evidence into this one.
    fn absorb(&mut self, child: &OperatorOutcome) {
        self.usage += child.usage;
        self.calls += child.calls;
        self.add_doc_ids(child.retrieved_doc_ids.iter().cloned());
        self.retrieval_queries
            .extend(child.retrieval_queries.iter().cloned());
        self.degraded |= child.degraded;
    }

    /// Number of retriever calls made, including nested ones.
    pub fn retrieval_calls(&self) -> usize {
        self.retrieval_queries.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OperatorError {
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl OperatorError {
    pub fn is_backend(&self) -> bool {
        matches!(self, OperatorError::Backend(_))
    }
}

/// What an operator is asked to do.
#[derive(Debug, Clone, Copy)]
pub struct OperatorInput<'a> {
    pub question: &'a str,
    /// Plan directive for this step, if run from a plan.
    pub directive: Option<&'a str>,
    /// Serialized results of earlier plan steps.
    pub context: Option<&'a str>,
}

impl<'a> OperatorInput<'a> {
    pub fn new(question: &'a str) -> Self {
        Self {
            question,
            directive: None,
            context: None,
        }
    }

    fn preamble(&self) -> String {
        let mut s = String::new();
        if let Some(d) = self.directive.filter(|d| !d.trim().is_empty()) {
            s.push_str(&format!("Instruction: {}\n", d.trim()));
        }
        if let Some(c) = self.context.filter(|c| !c.trim().is_empty()) {
            s.push_str(&format!("Results of earlier steps:\n{}\n", c.trim_end()));
        }
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

/// Shared dependencies of every operator call.
#[derive(Clone, Copy)]
pub struct OperatorContext<'a> {
    pub gateway: &'a Gateway,
    pub retriever: Option<&'a dyn Retriever>,
    pub budget: OperatorBudget,
    pub fixtures: &'a OperatorFixtures,
    pub routing: &'a AdaptiveRouting,
    /// Phase prefix for ledger tags, e.g. `executor`.
    pub tag_prefix: &'a str,
    pub temperature: f64,
}

impl<'a> OperatorContext<'a> {
    pub fn new(
        gateway: &'a Gateway,
        retriever: Option<&'a dyn Retriever>,
        fixtures: &'a OperatorFixtures,
        routing: &'a AdaptiveRouting,
    ) -> Self {
        Self {
            gateway,
            retriever,
            budget: OperatorBudget::default(),
            fixtures,
            routing,
            tag_prefix: "executor",
            temperature: 0.0,
        }
    }

    pub fn with_budget(mut self, budget: OperatorBudget) -> Self {
        self.budget = budget;
        self
    }

    fn tag(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.tag_prefix)
    }

    fn call(
        &self,
        tag_suffix: &str,
        messages: Vec<ChatMessage>,
        outcome: &mut OperatorOutcome,
    ) -> Result<String, LlmError> {
        let resp = self.gateway.complete(&CompletionRequest::new(
            self.tag(tag_suffix),
            messages,
            self.temperature,
        ))?;
        outcome.charge(resp.usage);
        Ok(resp.content)
    }

    fn search(
        &self,
        retriever: &dyn Retriever,
        query: &str,
        outcome: &mut OperatorOutcome,
    ) -> Result<Vec<Document>, RetrievalError> {
        outcome.retrieval_queries.push(query.to_string());
        let result = retriever.search(query, self.budget.k_docs)?;
        let docs: Vec<Document> = result
            .hits
            .iter()
            .filter_map(|h| retriever.document(&h.doc_id).cloned())
            .collect();
        outcome.add_doc_ids(docs.iter().map(|d| d.id.clone()));
        Ok(docs)
    }
}

/// Text after the last occurrence of `marker`, up to the end of that line.
pub fn extract_after_marker(text: &str, marker: &str) -> Option<String> {
    let pos = text.rfind(marker)?;
    let rest = &text[pos + marker.len()..];
    let line = rest.lines().next().unwrap_or("").trim();
    let line = line.strip_suffix('.').unwrap_or(line).trim();
    if line.is_empty() {
        None
    } else {
        Some(line.to_string())
    }
}

/// Last non-empty sentence of `text`; used when no marker is present.
pub fn last_sentence(text: &str) -> String {
    text.lines()
        .flat_map(|l| l.split(". "))
        .map(|s| s.trim().trim_end_matches('.').trim())
        .filter(|s| !s.is_empty())
        .last()
        .unwrap_or("")
        .to_string()
}

/// `(answer, marked)` for a response ending in `marker`.
fn extract_answer(text: &str, marker: &str) -> (String, bool) {
    match extract_after_marker(text, marker) {
        Some(a) => (a, true),
        None => (last_sentence(text), false),
    }
}

fn format_documents(docs: &[Document]) -> String {
    let mut s = String::from("Documents:\n");
    for (i, d) in docs.iter().enumerate() {
        if d.title.is_empty() {
            s.push_str(&format!("[{}] {}\n", i + 1, d.text.trim()));
        } else {
            s.push_str(&format!("[{}] {}: {}\n", i + 1, d.title, d.text.trim()));
        }
    }
    s
}

const COT_SYSTEM: &str = "You answer multi-hop questions by reasoning step by step. \
End with a final line of the form \"Answer: <answer>\".";

pub fn cot_messages(input: &OperatorInput<'_>, fixtures: &OperatorFixtures) -> Vec<ChatMessage> {
    let mut user = String::new();
    for d in &fixtures.cot_demos {
        user.push_str(&format!(
            "Question: {}\n{}\n{ANSWER_MARKER} {}\n\n",
            d.question, d.reasoning, d.answer
        ));
    }
    user.push_str(&input.preamble());
    user.push_str(&format!(
        "Question: {}\nLet's think step by step.",
        input.question.trim()
    ));
    vec![ChatMessage::system(COT_SYSTEM), ChatMessage::user(user)]
}

/// Closed-book chain of thought with the bundled demonstrations.
pub fn run_cot(
    ctx: &OperatorContext<'_>,
    input: &OperatorInput<'_>,
) -> Result<OperatorOutcome, OperatorError> {
    let mut out = OperatorOutcome::new(OperatorKind::CoT);
    let content = ctx.call("cot", cot_messages(input, ctx.fixtures), &mut out)?;
    let (answer, marked) = extract_answer(&content, ANSWER_MARKER);
    out.answer = answer;
    out.answer_marked = marked;
    out.reasoning = content;
    Ok(out)
}

/// Closed-book substitute for an operator whose retrieval is unavailable.
fn closed_book(
    kind: OperatorKind,
    ctx: &OperatorContext<'_>,
    input: &OperatorInput<'_>,
    mut out: OperatorOutcome,
) -> Result<OperatorOutcome, OperatorError> {
    let cot = run_cot(ctx, input)?;
    out.operator = kind;
    out.usage += cot.usage;
    out.calls += cot.calls;
    out.answer = cot.answer;
    out.answer_marked = cot.answer_marked;
    out.reasoning = cot.reasoning;
    out.degraded = true;
    Ok(out)
}

const SINGLE_SYSTEM: &str = "You answer multi-hop questions using the given documents. \
Reason step by step, then end with a final line of the form \"Answer: <answer>\".";

/// One retrieval with the question as query, then reasoning over the hits.
pub fn run_single_step(
    ctx: &OperatorContext<'_>,
    input: &OperatorInput<'_>,
) -> Result<OperatorOutcome, OperatorError> {
    let mut out = OperatorOutcome::new(OperatorKind::SingleStep);
    let Some(retriever) = ctx.retriever else {
        return closed_book(OperatorKind::SingleStep, ctx, input, out);
    };
    let docs = ctx.search(retriever, input.question, &mut out)?;
    if docs.is_empty() {
        return closed_book(OperatorKind::SingleStep, ctx, input, out);
    }
    let user = format!(
        "{}\n{}Question: {}\nLet's think step by step.",
        format_documents(&docs),
        input.preamble(),
        input.question.trim()
    );
    let content = ctx.call(
        "single_step",
        vec![ChatMessage::system(SINGLE_SYSTEM), ChatMessage::user(user)],
        &mut out,
    )?;
    let (answer, marked) = extract_answer(&content, ANSWER_MARKER);
    out.answer = answer;
    out.answer_marked = marked;
    out.reasoning = content;
    Ok(out)
}

const SUB_STEP_SYSTEM: &str = "You answer multi-hop questions by asking follow-up questions. \
At each turn, if another follow-up question is needed, write one line \"Follow up: <question>\". \
When the intermediate answers are enough, write \"So the final answer is: <answer>\".";

const LEAF_SYSTEM: &str =
    "Answer the question briefly. End with a final line of the form \"Answer: <answer>\".";

fn self_ask_demos(fixtures: &OperatorFixtures) -> String {
    let mut s = String::new();
    for d in &fixtures.self_ask_demos {
        s.push_str(&format!(
            "Question: {}\nAre follow up questions needed here: Yes.\n",
            d.question
        ));
        for step in &d.steps {
            s.push_str(&format!(
                "{FOLLOW_UP_MARKER} {}\n{INTERMEDIATE_MARKER} {}\n",
                step.follow_up, step.intermediate_answer
            ));
        }
        s.push_str(&format!("{FINAL_ANSWER_MARKER} {}\n\n", d.answer));
    }
    s
}

fn answer_leaf(
    ctx: &OperatorContext<'_>,
    sub_question: &str,
    leaf: LeafMode,
) -> Result<OperatorOutcome, OperatorError> {
    let input = OperatorInput::new(sub_question);
    let result = match leaf {
        LeafMode::SingleStep => run_single_step(ctx, &input),
        LeafMode::IterativeStep => run_iterative_step(ctx, &input),
        LeafMode::ClosedBook => {
            let mut out = OperatorOutcome::new(OperatorKind::CoT);
            let user = format!("Question: {}", sub_question.trim());
            let content = ctx.call(
                "sub_step.leaf",
                vec![ChatMessage::system(LEAF_SYSTEM), ChatMessage::user(user)],
                &mut out,
            )?;
            let (answer, marked) = match extract_after_marker(&content, ANSWER_MARKER) {
                Some(a) => (a, true),
                None => (content.lines().next().unwrap_or("").trim().to_string(), false),
            };
            out.answer = answer;
            out.answer_marked = marked;
            out.reasoning = content;
            Ok(out)
        }
    };
    match result {
        Err(OperatorError::Retrieval(e)) => {
            log::warn!("leaf retrieval failed for {sub_question:?}: {e}");
            let out = OperatorOutcome::new(OperatorKind::CoT);
            closed_book(OperatorKind::CoT, ctx, &input, out)
        }
        other => other,
    }
}

/// Self-ask style decomposition. Each follow-up question is answered with
/// `leaf`; the loop ends at the final-answer marker or after
/// `budget.max_iterations` decomposition calls, in which case one more
/// call forces a final answer.
pub fn run_sub_step(
    ctx: &OperatorContext<'_>,
    input: &OperatorInput<'_>,
    leaf: LeafMode,
) -> Result<OperatorOutcome, OperatorError> {
    let mut out = OperatorOutcome::new(OperatorKind::SubStep);
    let head = format!(
        "{}{}Question: {}\nAre follow up questions needed here:",
        self_ask_demos(ctx.fixtures),
        input.preamble(),
        input.question.trim()
    );
    let mut chain = String::new();
    let messages = |chain: &str| {
        vec![
            ChatMessage::system(SUB_STEP_SYSTEM),
            ChatMessage::user(format!("{head}{chain}")),
        ]
    };
    for _ in 0..ctx.budget.max_iterations {
        out.iterations += 1;
        let content = ctx.call("sub_step", messages(&chain), &mut out)?;
        if let Some(answer) = extract_after_marker(&content, FINAL_ANSWER_MARKER) {
            out.answer = answer;
            out.answer_marked = true;
            out.reasoning = format!("{}{chain}\n{FINAL_ANSWER_MARKER} {}", input.question, out.answer);
            return Ok(out);
        }
        let Some(follow_up) = extract_follow_up(&content) else {
            out.answer = last_sentence(&content);
            out.reasoning = format!("{}{chain}\n{content}", input.question);
            return Ok(out);
        };
        let leaf_out = answer_leaf(ctx, &follow_up, leaf)?;
        out.absorb(&leaf_out);
        chain.push_str(&format!(
            "\n{FOLLOW_UP_MARKER} {follow_up}\n{INTERMEDIATE_MARKER} {}",
            leaf_out.answer
        ));
        out.sub_results.push(SubResult {
            question: follow_up,
            outcome: leaf_out,
        });
    }
    out.budget_exhausted = true;
    let forced = format!("{chain}\nNo more follow up questions are allowed. {FINAL_ANSWER_MARKER}");
    let content = ctx.call("sub_step.final", messages(&forced), &mut out)?;
    let (answer, marked) = match extract_after_marker(&content, FINAL_ANSWER_MARKER) {
        Some(a) => (a, true),
        None => (last_sentence(&content), false),
    };
    out.answer = answer;
    out.answer_marked = marked;
    out.reasoning = format!("{}{chain}\n{FINAL_ANSWER_MARKER} {}", input.question, out.answer);
    Ok(out)
}

fn extract_follow_up(content: &str) -> Option<String> {
    let pos = content.find(FOLLOW_UP_MARKER)?;
    let q = content[pos + FOLLOW_UP_MARKER.len()..]
        .lines()
        .next()
        .unwrap_or("")
        .trim();
    (!q.is_empty()).then(|| q.to_string())
}

const ITERATIVE_SYSTEM: &str = "You answer multi-hop questions by interleaving retrieval and reasoning. \
Each turn, write exactly one new reasoning sentence based on the documents. \
When the evidence is sufficient, write \"So the final answer is: <answer>\".";

/// Retrieve-then-reason loop: round 1 queries with the question, later
/// rounds with the latest reasoning sentence. New documents accumulate
/// (deduplicated by id) in the prompt.
pub fn run_iterative_step(
    ctx: &OperatorContext<'_>,
    input: &OperatorInput<'_>,
) -> Result<OperatorOutcome, OperatorError> {
    let mut out = OperatorOutcome::new(OperatorKind::IterativeStep);
    let Some(retriever) = ctx.retriever else {
        return closed_book(OperatorKind::IterativeStep, ctx, input, out);
    };
    let mut docs: Vec<Document> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut sentences: Vec<String> = Vec::new();
    let prompt = |docs: &[Document], sentences: &[String], tail: &str| {
        let so_far = if sentences.is_empty() {
            "(none)".to_string()
        } else {
            sentences.join("\n")
        };
        let docs_block = if docs.is_empty() {
            "Documents:\n(none)\n".to_string()
        } else {
            format_documents(docs)
        };
        vec![
            ChatMessage::system(ITERATIVE_SYSTEM),
            ChatMessage::user(format!(
                "{docs_block}\n{}Question: {}\nReasoning so far:\n{so_far}\n{tail}",
                input.preamble(),
                input.question.trim()
            )),
        ]
    };
    for round in 0..ctx.budget.max_iterations {
        out.iterations += 1;
        let query = if round == 0 {
            Some(input.question.to_string())
        } else {
            sentences
                .last()
                .filter(|s| !crate::retrieval::tokenize_text(s).is_empty())
                .cloned()
        };
        if let Some(query) = query {
            for d in ctx.search(retriever, &query, &mut out)? {
                if seen.insert(d.id.clone()) {
                    docs.push(d);
                }
            }
        }
        let content = ctx.call("iterative_step", prompt(&docs, &sentences, "Next sentence:"), &mut out)?;
        if let Some(answer) = extract_after_marker(&content, FINAL_ANSWER_MARKER) {
            sentences.push(content.trim().to_string());
            out.answer = answer;
            out.answer_marked = true;
            out.reasoning = sentences.join("\n");
            return Ok(out);
        }
        let sentence = content
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or("")
            .to_string();
        sentences.push(sentence);
    }
    if docs.is_empty() {
        out.degraded = true;
    }
    out.budget_exhausted = true;
    let content = ctx.call(
        "iterative_step.final",
        prompt(&docs, &sentences, &format!("No more retrieval is allowed. {FINAL_ANSWER_MARKER}")),
        &mut out,
    )?;
    let (answer, marked) = match extract_after_marker(&content, FINAL_ANSWER_MARKER) {
        Some(a) => (a, true),
        None => (last_sentence(&content), false),
    };
    sentences.push(content.trim().to_string());
    out.answer = answer;
    out.answer_marked = marked;
    out.reasoning = sentences.join("\n");
    Ok(out)
}

/// Routes by question type through [`AdaptiveRouting`].
pub fn run_adaptive_step(
    ctx: &OperatorContext<'_>,
    input: &OperatorInput<'_>,
    q_type: &QuestionType,
) -> Result<OperatorOutcome, OperatorError> {
    let route = ctx.routing.route(q_type);
    let mut out = match route {
        Route::CoT => run_cot(ctx, input)?,
        Route::SubStep(leaf) => run_sub_step(ctx, input, leaf)?,
    };
    out.routing_note = Some(format!("{q_type} -> {}", route.describe()));
    Ok(out)
}

/// Dispatches one operator kind. `leaf` only matters for `SubStep`.
pub fn run_operator(
    kind: OperatorKind,
    ctx: &OperatorContext<'_>,
    input: &OperatorInput<'_>,
    q_type: &QuestionType,
    leaf: LeafMode,
) -> Result<OperatorOutcome, OperatorError> {
    match kind {
        OperatorKind::CoT => run_cot(ctx, input),
        OperatorKind::SingleStep => run_single_step(ctx, input),
        OperatorKind::IterativeStep => run_iterative_step(ctx, input),
        OperatorKind::SubStep => run_sub_step(ctx, input, leaf),
        OperatorKind::AdaptiveStep => run_adaptive_step(ctx, input, q_type),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockRule};
    use crate::retrieval::{build_index, Bm25Params, RetrievalIndex};
    use std::sync::Arc;

    fn corpus() -> RetrievalIndex {
        build_index(
            [
                Document::new("d1", "Big Stone Gap (film)", "Big Stone Gap is a 2014 film directed by Adriana Trigiani."),
                Document::new("d2", "Adriana Trigiani", "Adriana Trigiani is an author based in Greenwich Village, New York City."),
                Document::new("d3", "Paris", "Paris is the capital of France."),
                Document::new("d4", "Greenwich Village", "Greenwich Village is a neighborhood in Manhattan."),
            ],
            Bm25Params::default(),
        )
        .unwrap()
    }

    struct Env {
        gw: Gateway,
        mock: Arc<MockBackend>,
        fixtures: OperatorFixtures,
        routing: AdaptiveRouting,
        index: RetrievalIndex,
    }

    fn env(rules: Vec<MockRule>) -> Env {
        let mock = Arc::new(MockBackend::new(rules));
        Env {
            gw: Gateway::new(mock.clone()),
            mock,
            fixtures: OperatorFixtures::default(),
            routing: AdaptiveRouting::default(),
            index: corpus(),
        }
    }

    impl Env {
        fn ctx(&self) -> OperatorContext<'_> {
            OperatorContext::new(&self.gw, Some(&self.index), &self.fixtures, &self.routing)
        }

        fn closed(&self) -> OperatorContext<'_> {
            OperatorContext::new(&self.gw, None, &self.fixtures, &self.routing)
        }
    }

    #[test]
    fn cot_extracts_answer_line_without_retrieval() {
        let e = env(vec![MockRule::new("executor.cot", "Paris is the capital.\nAnswer: Paris")]);
        let out = run_cot(&e.ctx(), &OperatorInput::new("Capital of France?")).unwrap();
        assert_eq!(out.answer, "Paris");
        assert!(out.answer_marked);
        assert!(out.retrieved_doc_ids.is_empty());
        assert_eq!(out.retrieval_calls(), 0);
    }

    #[test]
    fn cot_prompt_has_four_demonstrations() {
        let e = env(vec![MockRule::new("*", "Answer: x")]);
        run_cot(&e.ctx(), &OperatorInput::new("Q?")).unwrap();
        let req = &e.mock.requests()[0];
        let user = req.last_user().unwrap();
        assert_eq!(user.matches("\nAnswer: ").count(), 4);
        for d in &e.fixtures.cot_demos {
            assert!(user.contains(&d.question));
        }
        assert!(user.ends_with("Question: Q?\nLet's think step by step."));
    }

    #[test]
    fn cot_without_marker_falls_back_to_last_sentence() {
        let e = env(vec![MockRule::new("*", "It is in France. The city is Paris.")]);
        let out = run_cot(&e.ctx(), &OperatorInput::new("Q?")).unwrap();
        assert_eq!(out.answer, "The city is Paris");
        assert!(!out.answer_marked);
    }

    #[test]
    fn single_step_puts_top_docs_in_score_order() {
        let e = env(vec![MockRule::new("executor.single_step", "Answer: Adriana Trigiani")]);
        let ctx = e.ctx().with_budget(OperatorBudget::default().with_k(3));
        let q = "Who directed Big Stone Gap?";
        let out = run_single_step(&ctx, &OperatorInput::new(q)).unwrap();
        assert_eq!(out.retrieval_calls(), 1);
        let expected = crate::retrieval::retrieve(&e.index, q, 3).unwrap();
        let ids: Vec<String> = expected.hits.iter().map(|h| h.doc_id.clone()).collect();
        assert_eq!(out.retrieved_doc_ids, ids);
        let prompt = e.mock.requests()[0].last_user().unwrap().to_string();
        let positions: Vec<usize> = ids
            .iter()
            .map(|id| prompt.find(&e.index.document(id).unwrap().text).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_step_without_index_is_closed_book() {
        let e = env(vec![MockRule::new("executor.cot", "Answer: Paris")]);
        let out = run_single_step(&e.closed(), &OperatorInput::new("Capital of France?")).unwrap();
        assert!(out.retrieved_doc_ids.is_empty());
        assert!(out.degraded);
        assert_eq!(out.operator, OperatorKind::SingleStep);
        assert_eq!(out.answer, "Paris");
    }

    #[test]
    fn single_step_empty_query_errors() {
        let e = env(vec![MockRule::new("*", "Answer: x")]);
        assert!(matches!(
            run_single_step(&e.ctx(), &OperatorInput::new("?!")),
            Err(OperatorError::Retrieval(RetrievalError::EmptyQuery(_)))
        ));
    }

    fn two_hop_sub_step_rules() -> Vec<MockRule> {
        vec![
            MockRule::new("executor.sub_step", "So the final answer is: Greenwich Village")
                .containing("Intermediate answer: based in Greenwich Village"),
            MockRule::new("executor.sub_step", "Follow up: Where is Adriana Trigiani based?")
                .containing("Intermediate answer: Adriana Trigiani"),
            MockRule::new("executor.sub_step", "Follow up: Who directed Big Stone Gap?"),
            MockRule::new("executor.single_step", "Answer: Adriana Trigiani")
                .containing("Question: Who directed Big Stone Gap?"),
            MockRule::new("executor.single_step", "Answer: based in Greenwich Village"),
            MockRule::new("executor.sub_step.leaf", "Answer: based in Greenwich Village")
                .containing("Where is"),
            MockRule::new("executor.sub_step.leaf", "Answer: Adriana Trigiani"),
        ]
    }

    #[test]
    fn sub_step_with_two_follow_ups() {
        let e = env(two_hop_sub_step_rules());
        let out = run_sub_step(
            &e.ctx(),
            &OperatorInput::new("Where is the director of Big Stone Gap based?"),
            LeafMode::SingleStep,
        )
        .unwrap();
        assert_eq!(out.sub_results.len(), 2);
        assert_eq!(out.iterations, 3);
        assert_eq!(out.retrieval_calls(), 2);
        assert_eq!(out.answer, "Greenwich Village");
        assert!(!out.budget_exhausted);
        assert_eq!(out.calls, 5);
        assert_eq!(out.usage, e.gw.ledger().total());
    }

    #[test]
    fn sub_step_closed_book_leaves_do_not_retrieve() {
        let e = env(two_hop_sub_step_rules());
        let out = run_sub_step(
            &e.ctx(),
            &OperatorInput::new("Where is the director of Big Stone Gap based?"),
            LeafMode::ClosedBook,
        )
        .unwrap();
        assert_eq!(out.sub_results.len(), 2);
        assert_eq!(out.retrieval_calls(), 0);
    }

    #[test]
    fn sub_step_immediate_answer() {
        let e = env(vec![MockRule::new("executor.sub_step", "So the final answer is: Paris")]);
        let out = run_sub_step(&e.ctx(), &OperatorInput::new("Q?"), LeafMode::SingleStep).unwrap();
        assert!(out.sub_results.is_empty());
        assert_eq!(out.iterations, 1);
        assert_eq!(out.answer, "Paris");
    }

    #[test]
    fn sub_step_budget_forces_final_answer() {
        let e = env(vec![
            MockRule::new("executor.sub_step.final", "So the final answer is: forced"),
            MockRule::new("executor.sub_step", "Follow up: Again?"),
            MockRule::new("executor.sub_step.leaf", "Answer: dunno"),
        ]);
        let ctx = e.ctx().with_budget(OperatorBudget {
            max_iterations: 2,
            k_docs: 5,
        });
        let out = run_sub_step(&ctx, &OperatorInput::new("Q?"), LeafMode::ClosedBook).unwrap();
        assert!(out.budget_exhausted);
        assert_eq!(out.sub_results.len(), 2);
        assert_eq!(out.answer, "forced");
    }

    fn iterative_rules(answer_round: usize) -> Vec<MockRule> {
        let mut rules = Vec::new();
        rules.push(MockRule::new("executor.iterative_step.final", "So the final answer is: forced"));
        for r in (1..=answer_round).rev() {
            let mut rule = if r == answer_round {
                MockRule::new("executor.iterative_step", "So the final answer is: Greenwich Village")
            } else {
                MockRule::new("executor.iterative_step", format!("Sentence {r} mentions Adriana Trigiani."))
            };
            if r > 1 {
                rule = rule.containing(format!("Sentence {} mentions", r - 1));
            }
            rules.push(rule);
        }
        rules
    }

    #[test]
    fn iterative_answering_in_round_one_retrieves_once() {
        let e = env(iterative_rules(1));
        let out = run_iterative_step(&e.ctx(), &OperatorInput::new("Who directed Big Stone Gap?")).unwrap();
        assert_eq!(out.retrieval_calls(), 1);
        assert_eq!(out.answer, "Greenwich Village");
    }

    #[test]
    fn iterative_queries_follow_reasoning_sentences() {
        let e = env(iterative_rules(3));
        let q = "Where is the director of Big Stone Gap based?";
        let out = run_iterative_step(&e.ctx(), &OperatorInput::new(q)).unwrap();
        assert_eq!(out.retrieval_calls(), 3);
        assert_eq!(
            out.retrieval_queries,
            vec![
                q.to_string(),
                "Sentence 1 mentions Adriana Trigiani.".to_string(),
                "Sentence 2 mentions Adriana Trigiani.".to_string()
            ]
        );
        let unique: HashSet<_> = out.retrieved_doc_ids.iter().collect();
        assert_eq!(unique.len(), out.retrieved_doc_ids.len());
    }

    #[test]
    fn iterative_cap_forces_answer() {
        let e = env(vec![
            MockRule::new("executor.iterative_step.final", "So the final answer is: forced"),
            MockRule::new("executor.iterative_step", "Still thinking about Trigiani."),
        ]);
        let ctx = e.ctx().with_budget(OperatorBudget {
            max_iterations: 2,
            k_docs: 5,
        });
        let out = run_iterative_step(&ctx, &OperatorInput::new("Who is Trigiani?")).unwrap();
        assert!(out.budget_exhausted);
        assert_eq!(out.retrieval_calls(), 2);
        assert_eq!(out.answer, "forced");
    }

    #[test]
    fn adaptive_routing_by_type() {
        let mut rules = two_hop_sub_step_rules();
        rules.push(
            MockRule::new("executor.iterative_step", "So the final answer is: Adriana Trigiani")
                .containing("Question: Who directed Big Stone Gap?"),
        );
        rules.push(MockRule::new("executor.iterative_step", "So the final answer is: based in Greenwich Village"));
        rules.push(MockRule::new("executor.cot", "Answer: Paris"));
        let e = env(rules);
        let q = OperatorInput::new("Where is the director of Big Stone Gap based?");

        let t = run_adaptive_step(&e.ctx(), &q, &QuestionType::new("Temporal")).unwrap();
        let direct = run_sub_step(&e.ctx(), &q, LeafMode::SingleStep).unwrap();
        assert_eq!(t.answer, direct.answer);
        assert_eq!(t.retrieval_queries, direct.retrieval_queries);
        assert_eq!(t.routing_note.as_deref(), Some("Temporal -> SubStep + SingleStep"));

        let i = run_adaptive_step(&e.ctx(), &q, &QuestionType::new("Inference")).unwrap();
        assert!(i.sub_results.iter().all(|s| s.outcome.operator == OperatorKind::IterativeStep));

        let n = run_adaptive_step(&e.ctx(), &q, &QuestionType::null()).unwrap();
        assert_eq!(n.operator, OperatorKind::CoT);
        assert_eq!(n.retrieval_calls(), 0);
    }

    #[test]
    fn budget_bounds() {
        assert!(OperatorBudget::default().validate().is_ok());
        assert_eq!(OperatorBudget::default().with_k(1).k_docs, 3);
        assert_eq!(OperatorBudget::default().with_k(50).k_docs, 10);
        assert!(OperatorBudget { max_iterations: 0, k_docs: 5 }.validate().is_err());
        assert!(OperatorBudget { max_iterations: 1, k_docs: 2 }.validate().is_err());
    }

    #[test]
    fn marker_extraction() {
        assert_eq!(extract_after_marker("x\nAnswer: Paris.", ANSWER_MARKER).as_deref(), Some("Paris"));
        assert_eq!(extract_after_marker("Answer: a\nAnswer: b", ANSWER_MARKER).as_deref(), Some("b"));
        assert_eq!(extract_after_marker("Answer:", ANSWER_MARKER), None);
        assert_eq!(last_sentence("One. Two.\n"), "Two");
    }

    #[test]
    fn default_routes_expand_to_valid_plans() {
        let r = AdaptiveRouting::default();
        for label in ["Inference", "Comparison", "Temporal", "Null", "Compositional"] {
            let steps = r.route(&QuestionType::new(label)).plan_steps();
            assert!(!steps.is_empty());
            for (i, s) in steps.iter().enumerate() {
                assert!(s.depends_on.iter().all(|&d| d < i));
            }
        }
    }
}
