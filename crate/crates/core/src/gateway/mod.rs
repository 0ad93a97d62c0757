//! Chat-completion gateway: one request/response shape, pluggable backends,
//! and a shared token ledger.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::model::TokenUsage;

pub mod http;
pub mod mock;

pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use mock::{MockBackend, MockRule};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Phase label such as `classifier` or `debate.fast`. The part before
    /// the first `.` is the phase used in consumption reports.
    pub tag: String,
}

impl CompletionRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<ChatMessage>, temperature: f64) -> Self {
        Self {
            messages,
            temperature,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens is 0".into()));
        }
        if let Some(m) = self
            .messages
            .iter()
            .find(|m| m.role != ChatRole::Assistant && m.content.trim().is_empty())
        {
            return Err(LlmError::InvalidRequest(format!(
                "empty {:?} message",
                m.role
            )));
        }
        Ok(())
    }

    /// All message contents joined by newlines.
    pub fn joined_content(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub content: String,
    pub usage: TokenUsage,
    pub backend_id: String,
}

/// What a backend returns before the gateway fills in missing usage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCompletion {
    pub content: String,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("mock script has no rule for tag {tag:?}")]
    ScriptMiss { tag: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// A chat-completion provider. Implementations must be safe to call from
/// several threads at once.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Question the call was made for, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    pub tag: String,
    pub usage: TokenUsage,
}

/// Append-only, thread-safe record of every completion's token usage.
#[derive(Debug, Default)]
pub struct TokenLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger poisoned").clone()
    }

    pub fn entries_for(&self, scope: &str) -> Vec<LedgerEntry> {
        self.entries
            .lock()
            .expect("ledger poisoned")
            .iter()
            .filter(|e| e.scope.as_deref() == Some(scope))
            .cloned()
            .collect()
    }

    pub fn total(&self) -> TokenUsage {
        self.entries
            .lock()
            .expect("ledger poisoned")
            .iter()
            .map(|e| e.usage)
            .sum()
    }

    pub fn report(&self) -> LedgerReport {
        ledger_report(&self.entries())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub by_tag: BTreeMap<String, TokenUsage>,
    pub total: TokenUsage,
}

/// Per-tag totals plus the grand total.
pub fn ledger_report(entries: &[LedgerEntry]) -> LedgerReport {
    let mut by_tag: BTreeMap<String, TokenUsage> = BTreeMap::new();
    for e in entries {
        *by_tag.entry(e.tag.clone()).or_default() += e.usage;
    }
    let total = by_tag.values().copied().sum();
    LedgerReport { by_tag, total }
}

/// Approximate token count: every maximal alphanumeric run is one token and
/// every other non-whitespace character is one token.
pub fn count_tokens_approx(text: &str) -> u64 {
    let mut count = 0u64;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

/// Handle used by every pipeline stage. Cloning is cheap; clones share the
/// backend and the ledger.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    ledger: Arc<TokenLedger>,
    scope: Option<Arc<str>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self::with_ledger(backend, Arc::new(TokenLedger::new()))
    }

    pub fn with_ledger(backend: Arc<dyn ChatBackend>, ledger: Arc<TokenLedger>) -> Self {
        Self {
            backend,
            ledger,
            scope: None,
        }
    }

    /// A handle whose ledger entries are attributed to `scope`.
    pub fn scoped(&self, scope: impl AsRef<str>) -> Self {
        Self {
            backend: Arc::clone(&self.backend),
            ledger: Arc::clone(&self.ledger),
            scope: Some(Arc::from(scope.as_ref())),
        }
    }

    pub fn ledger(&self) -> &Arc<TokenLedger> {
        &self.ledger
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let raw = self.backend.send(request)?;
        let usage = raw.usage.unwrap_or_else(|| {
            TokenUsage::new(
                count_tokens_approx(&request.joined_content()),
                count_tokens_approx(&raw.content),
            )
        });
        self.ledger.record(LedgerEntry {
            scope: self.scope.as_deref().map(str::to_string),
            tag: request.tag.clone(),
            usage,
        });
        log::debug!("{} -> {} tokens", request.tag, usage.total());
        Ok(CompletionResponse {
            content: raw.content,
            usage,
            backend_id: self.backend.id().to_string(),
        })
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("scope", &self.scope)
            .finish()
    }
}
