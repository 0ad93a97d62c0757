//! Runs an [`ExecutionPlan`] step by step and composes the final answer.

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, CompletionRequest, LlmError};
use crate::model::{ExecutionPlan, OperatorKind, PlanStep, Question, QuestionType, TokenUsage};
use crate::operators::{
    extract_after_marker, last_sentence, run_cot, run_operator, LeafMode, OperatorContext,
    OperatorError, OperatorInput, OperatorOutcome, ANSWER_MARKER,
};

pub const AGGREGATE_INSTRUCTION: &str =
    "Given the question, the sub-questions and their answers below, state the final answer.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub operator: OperatorKind,
    pub directive: String,
    pub outcome: OperatorOutcome,
    /// Set when the step's operator failed and a closed-book substitute ran.
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregation {
    pub content: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub question_id: String,
    pub steps: Vec<StepRecord>,
    pub final_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
    pub total_usage: TokenUsage,
}

impl ExecutionTrace {
    /// Sum of step usages plus the aggregation call.
    pub fn recomputed_usage(&self) -> TokenUsage {
        let steps: TokenUsage = self.steps.iter().map(|s| s.outcome.usage).sum();
        steps + self.aggregation.as_ref().map_or(TokenUsage::ZERO, |a| a.usage)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error("step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: LlmError,
    },
    #[error("aggregation: {0}")]
    Aggregation(#[source] LlmError),
    #[error("plan has no steps")]
    EmptyPlan,
}

impl ExecutorError {
    pub fn llm_error(&self) -> Option<&LlmError> {
        match self {
            ExecutorError::Backend { source, .. } | ExecutorError::Aggregation(source) => Some(source),
            ExecutorError::EmptyPlan => None,
        }
    }
}

/// Leaf mode for a `SubStep` at `index`: the operator of the first later
/// step that depends on it, when that is a retrieval operator.
pub fn sub_step_leaf(steps: &[PlanStep], index: usize) -> LeafMode {
    steps
        .iter()
        .skip(index + 1)
        .find(|s| s.depends_on.contains(&index))
        .and_then(|s| LeafMode::for_operator(s.operator))
        .unwrap_or(LeafMode::ClosedBook)
}

fn describe_outcome(index: usize, rec: &StepRecord) -> String {
    let mut s = format!("Step {} ({}):", index + 1, rec.operator);
    for sub in &rec.outcome.sub_results {
        s.push_str(&format!(
            "\n  Sub-question: {}\n  Answer: {}",
            sub.question, sub.outcome.answer
        ));
    }
    let reasoning = rec.outcome.reasoning.trim();
    if !reasoning.is_empty() && rec.outcome.sub_results.is_empty() {
        s.push_str(&format!("\n  Reasoning: {}", reasoning.replace('\n', " ")));
    }
    s.push_str(&format!("\n  Result: {}", rec.outcome.answer));
    s
}

/// Closed-book stand-in for a step whose operator failed for a reason
/// other than the backend.
pub fn degrade_step(
    step: &PlanStep,
    question: &Question,
    context: Option<&str>,
    ctx: &OperatorContext<'_>,
) -> Result<OperatorOutcome, LlmError> {
    let input = OperatorInput {
        question: &question.text,
        directive: Some(step.directive.as_str()),
        context,
    };
    let mut out = match run_cot(ctx, &input) {
        Ok(o) => o,
        Err(OperatorError::Backend(e)) => return Err(e),
        Err(OperatorError::Retrieval(e)) => unreachable!("closed-book step retrieved: {e}"),
    };
    out.operator = step.operator;
    out.degraded = true;
    Ok(out)
}

/// Runs the steps in order. Each step sees its directive and the outcomes
/// of the steps it depends on. A final aggregation call composes the
/// answer unless the plan has one step or the last step already produced
/// a marked answer.
pub fn execute_plan(
    plan: &ExecutionPlan,
    question: &Question,
    q_type: &QuestionType,
    ctx: &OperatorContext<'_>,
) -> Result<ExecutionTrace, ExecutorError> {
    if plan.steps.is_empty() {
        return Err(ExecutorError::EmptyPlan);
    }
    let mut records: Vec<StepRecord> = Vec::with_capacity(plan.steps.len());
    for (i, step) in plan.steps.iter().enumerate() {
        let context: Vec<String> = step
            .depends_on
            .iter()
            .filter_map(|&d| records.get(d).map(|r| describe_outcome(d, r)))
            .collect();
        let context = (!context.is_empty()).then(|| context.join("\n"));
        let input = OperatorInput {
            question: &question.text,
            directive: Some(step.directive.as_str()),
            context: context.as_deref(),
        };
        let leaf = sub_step_leaf(&plan.steps, i);
        let (outcome, degraded, error) = match run_operator(step.operator, ctx, &input, q_type, leaf) {
            Ok(o) => {
                let d = o.degraded;
                (o, d, None)
            }
            Err(OperatorError::Backend(e)) => return Err(ExecutorError::Backend { step: i, source: e }),
            Err(OperatorError::Retrieval(e)) => {
                log::warn!("{}: step {i} ({}) degraded: {e}", question.id, step.operator);
                let o = degrade_step(step, question, context.as_deref(), ctx)
                    .map_err(|e| ExecutorError::Backend { step: i, source: e })?;
                (o, true, Some(e.to_string()))
            }
        };
        records.push(StepRecord {
            index: i,
            operator: step.operator,
            directive: step.directive.clone(),
            outcome,
            degraded,
            error,
        });
    }

    let last = records.last().expect("non-empty plan");
    let (final_answer, aggregation) = if records.len() == 1 || last.outcome.answer_marked {
        (last.outcome.answer.clone(), None)
    } else {
        let mut body = format!(
            "{AGGREGATE_INSTRUCTION}\n\nQuestion: {}\n\n",
            question.text.trim()
        );
        for r in &records {
            body.push_str(&describe_outcome(r.index, r));
            body.push('\n');
        }
        body.push_str(&format!("\nEnd with a final line of the form \"{ANSWER_MARKER} <answer>\"."));
        let resp = ctx
            .gateway
            .complete(&CompletionRequest::new(
                format!("{}.aggregate", ctx.tag_prefix),
                vec![ChatMessage::user(body)],
                ctx.temperature,
            ))
            .map_err(ExecutorError::Aggregation)?;
        let answer = extract_after_marker(&resp.content, ANSWER_MARKER)
            .unwrap_or_else(|| last_sentence(&resp.content));
        (
            answer,
            Some(Aggregation {
                content: resp.content,
                usage: resp.usage,
            }),
        )
    };

    let mut trace = ExecutionTrace {
        question_id: question.id.clone(),
        steps: records,
        final_answer,
        aggregation,
        total_usage: TokenUsage::ZERO,
    };
    trace.total_usage = trace.recomputed_usage();
    Ok(trace)
}
