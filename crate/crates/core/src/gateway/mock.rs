//! Scripted, deterministic backend for offline runs and tests.
//!
//! A script is an ordered list of rules. The first rule whose tag pattern
//! matches the request tag and whose substrings all occur in the request
//! text answers the call. Responses are a pure function of the script and
//! the request.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, CompletionRequest, LlmError, RawCompletion};
use crate::model::TokenUsage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Tag pattern; `*` matches any run of characters.
    pub tag: String,
    /// Substrings that must all occur in the joined message contents.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// Substrings none of which may occur.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
    pub respond: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

impl MockRule {
    pub fn new(tag: impl Into<String>, respond: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            contains: Vec::new(),
            excludes: Vec::new(),
            respond: respond.into(),
            usage: None,
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn excluding(mut self, needle: impl Into<String>) -> Self {
        self.excludes.push(needle.into());
        self
    }

    pub fn with_usage(mut self, usage: TokenUsage) -> Self {
        self.usage = Some(usage);
        self
    }

    fn matches(&self, tag: &str, text: &str) -> bool {
        glob_match(&self.tag, tag)
            && self.contains.iter().all(|n| text.contains(n.as_str()))
            && !self.excludes.iter().any(|n| text.contains(n.as_str()))
    }
}

/// `*`-only glob matching.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last)
    {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(pos) => rest = &rest[pos + mid.len()..],
            None => return false,
        }
    }
    true
}

#[derive(Debug)]
pub struct MockBackend {
    id: String,
    rules: Vec<MockRule>,
    log: Mutex<Vec<CompletionRequest>>,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self {
            id: "mock".to_string(),
            rules,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    pub fn from_file(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn rules(&self) -> &[MockRule] {
        &self.rules
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn respond_to(&self, request: &CompletionRequest) -> Option<&MockRule> {
        let text = request.joined_content();
        self.rules.iter().find(|r| r.matches(&request.tag, &text))
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        self.log
            .lock()
            .expect("mock log poisoned")
            .push(request.clone());
        let rule = self.respond_to(request).ok_or_else(|| LlmError::ScriptMiss {
            tag: request.tag.clone(),
        })?;
        Ok(RawCompletion {
            content: rule.respond.clone(),
            usage: rule.usage,
        })
    }
}
