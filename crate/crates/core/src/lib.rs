//! Question-type-aware planning for multi-hop question answering.
//!
//! A question is classified into a type, debaters argue over which
//! reasoning operators to combine, a judge emits an execution plan, and
//! the plan is run against a BM25 index through a chat-completion backend.

pub mod classifier;
pub mod debate;
pub mod eval;
pub mod executor;
pub mod gateway;
pub mod model;
pub mod operators;
pub mod par;
pub mod retrieval;

pub use gateway::{Gateway, LlmError};
pub use model::{ExecutionPlan, OperatorKind, Question, QuestionType, TokenUsage, Transcript};
pub use par::Execution;
