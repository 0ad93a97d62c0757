//! Client for OpenAI-compatible `POST /v1/chat/completions` endpoints.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, CompletionRequest, LlmError, RawCompletion};
use crate::model::TokenUsage;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "BELLE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts per call, including the first. 1 disables retries.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn disabled() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    /// Delay before attempt `attempt + 1` (attempts count from 1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(20));
        Duration::from_millis(exp.min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_in_flight() -> usize {
    4
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout_secs: default_timeout_secs(),
            retry: RetryPolicy::default(),
            max_in_flight: default_in_flight(),
        }
    }

    /// Reads the API key from [`API_KEY_ENV`] when none is set.
    pub fn with_env_key(mut self) -> Self {
        if self.api_key.is_none() {
            self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        }
        self
    }

    pub fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a InFlight);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(RawCompletion),
    Retry(LlmError, Option<Duration>),
    Fatal(LlmError),
}

pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        let in_flight = InFlight::new(cfg.max_in_flight);
        Self {
            cfg,
            agent,
            in_flight,
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn body(&self, request: &CompletionRequest) -> String {
        json!({
            "model": self.cfg.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
        .to_string()
    }

    fn attempt(&self, url: &str, body: &str) -> Attempt {
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(LlmError::Transport(e.to_string()), None),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(LlmError::Transport(e.to_string()), None),
        };
        match status {
            200..=299 => match parse_completion(&text) {
                Ok(c) => Attempt::Done(c),
                Err(e) => Attempt::Fatal(e),
            },
            429 => Attempt::Retry(LlmError::RateLimited { attempts: 0 }, retry_after),
            500..=599 => Attempt::Retry(
                LlmError::Status {
                    status,
                    body: truncate(&text, 500),
                },
                retry_after,
            ),
            _ => Attempt::Fatal(LlmError::Status {
                status,
                body: truncate(&text, 500),
            }),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.cfg.model
    }

    fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, LlmError> {
        let _permit = self.in_flight.acquire();
        let url = self.cfg.endpoint();
        let body = self.body(request);
        let max = self.cfg.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.attempt(&url, &body) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e, wait) => {
                    if attempt >= max {
                        return Err(match e {
                            LlmError::RateLimited { .. } => LlmError::RateLimited { attempts: attempt },
                            other => other,
                        });
                    }
                    let delay = wait.unwrap_or_else(|| self.cfg.retry.backoff(attempt));
                    log::warn!("{}: attempt {attempt} failed ({e}), retrying in {delay:?}", request.tag);
                    thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Extracts `choices[0].message.content` and optional `usage`.
pub fn parse_completion(body: &str) -> Result<RawCompletion, LlmError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))?;
    let usage = v.get("usage").and_then(|u| {
        let p = u.get("prompt_tokens")?.as_u64()?;
        let c = u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0);
        Some(TokenUsage::new(p, c))
    });
    Ok(RawCompletion {
        content: content.to_string(),
        usage,
    })
}
