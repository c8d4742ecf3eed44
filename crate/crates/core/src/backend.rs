//! Classifier backends.
//!
//! [`ChatCompletionsBackend`] talks to any OpenAI-style `/chat/completions`
//! endpoint; [`MockBackend`] is a deterministic rule table for tests and
//! offline evaluation.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::corpus::{normalize_text, Label};
use crate::prompting::{render_verdict, PromptText};

/// Env var consulted for the API key when the config does not name another.
pub const DEFAULT_API_KEY_ENV: &str = "HOMEGATE_API_KEY";
pub const MAX_RETRIES_LIMIT: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub temperature: f64,
    /// Sent as `seed` when set.
    pub seed: Option<u64>,
    pub max_in_flight: usize,
    /// Name of the env var holding the API key.
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "qwen2.5-3b-instruct-rejection".into(),
            timeout_ms: 5_000,
            max_retries: 2,
            retry_base_delay_ms: 100,
            temperature: 0.0,
            seed: Some(0),
            max_in_flight: 8,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.to_string()));
        if self.timeout_ms == 0 {
            return bad("timeout must be positive");
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return bad("max_retries must be at most 5");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be non-negative");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return bad("base_url must be an http(s) URL");
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// Upper bound of the backoff before retry number `attempt` (0-based).
    pub fn backoff_cap(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.retry_base_delay_ms.saturating_mul(1u64 << attempt.min(20)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint rejected credentials (HTTP {status})")]
    Auth { status: u16 },
    #[error("endpoint returned HTTP {status} after {attempts} attempt(s)")]
    Status { status: u16, attempts: u32 },
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
}

impl BackendError {
    /// True for errors that say nothing about the endpoint being reachable.
    pub fn is_unreachable(&self) -> bool {
        matches!(self, BackendError::Transport { .. } | BackendError::Timeout { .. })
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn classify(&self, prompt: &PromptText) -> Result<BackendResponse, BackendError>;

    /// Lightweight reachability check.
    async fn probe(&self) -> bool;

    /// Stable identity used in config fingerprints and reports.
    fn describe(&self) -> String;
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for Arc<B> {
    async fn classify(&self, prompt: &PromptText) -> Result<BackendResponse, BackendError> {
        (**self).classify(prompt).await
    }

    async fn probe(&self) -> bool {
        (**self).probe().await
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Client for an OpenAI-style chat-completions endpoint.
pub struct ChatCompletionsBackend {
    config: BackendConfig,
    api_key: Option<String>,
    client: reqwest::Client,
    in_flight: Semaphore,
}

impl fmt::Debug for ChatCompletionsBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatCompletionsBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum AttemptError {
    Retryable(BackendError),
    Fatal(BackendError),
}

impl ChatCompletionsBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn request_body(&self, prompt: &PromptText) -> Value {
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.config.temperature,
            "stream": false,
        });
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    async fn attempt(&self, body: &Value, attempts: u32) -> Result<String, AttemptError> {
        let mut req = self.client.post(self.config.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            AttemptError::Retryable(if e.is_timeout() {
                BackendError::Timeout { attempts }
            } else {
                BackendError::Transport {
                    attempts,
                    message: e.to_string(),
                }
            })
        })?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(AttemptError::Fatal(BackendError::Auth { status }));
        }
        if status == 429 || (500..600).contains(&status) {
            return Err(AttemptError::Retryable(BackendError::Status { status, attempts }));
        }
        if !(200..300).contains(&status) {
            return Err(AttemptError::Fatal(BackendError::Status { status, attempts }));
        }
        let bytes = resp.bytes().await.map_err(|e| {
            AttemptError::Retryable(if e.is_timeout() {
                BackendError::Timeout { attempts }
            } else {
                BackendError::Transport {
                    attempts,
                    message: e.to_string(),
                }
            })
        })?;
        let value: Value = serde_json::from_slice(&bytes)
            .map_err(|e| AttemptError::Fatal(BackendError::MalformedResponse(e.to_string())))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                AttemptError::Fatal(BackendError::MalformedResponse(
                    "missing choices[0].message.content".into(),
                ))
            })
    }

    fn jittered_backoff(&self, attempt: u32) -> Duration {
        let cap = self.config.backoff_cap(attempt);
        let factor: f64 = rand::rng().random_range(0.5..=1.0);
        cap.mul_f64(factor)
    }
}

#[async_trait]
impl Backend for ChatCompletionsBackend {
    async fn classify(&self, prompt: &PromptText) -> Result<BackendResponse, BackendError> {
        let _permit = self.in_flight.acquire().await.expect("semaphore is never closed");
        let body = self.request_body(prompt);
        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, attempts).await {
                Ok(raw_text) => {
                    return Ok(BackendResponse {
                        raw_text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts,
                    })
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(e)) => {
                    if attempts > self.config.max_retries {
                        return Err(e);
                    }
                    tracing::debug!(attempt = attempts, error = %e, "retrying classifier call");
                    tokio::time::sleep(self.jittered_backoff(attempts - 1)).await;
                }
            }
        }
    }

    async fn probe(&self) -> bool {
        let url = format!("{}/models", self.config.base_url.trim_end_matches('/'));
        let mut req = self.client.get(url);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        match req.send().await {
            Ok(resp) => !resp.status().is_server_error(),
            Err(_) => false,
        }
    }

    fn describe(&self) -> String {
        format!("chat-completions:{}@{}", self.config.model_name, self.config.base_url)
    }
}

/// One row of a mock rule table: a substring of the query and the verdict it triggers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub verdict: Label,
}

/// Ordered substring rules with a mandatory default verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRules {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default: Label,
    /// When set, a knowledge-base case in the prompt whose utterance equals
    /// the query overrides the rule table.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub follow_cases: bool,
}

impl MockRules {
    pub fn always(verdict: Label) -> Self {
        Self {
            rules: Vec::new(),
            default: verdict,
            follow_cases: false,
        }
    }

    pub fn following_cases(mut self) -> Self {
        self.follow_cases = true;
        self
    }

    pub fn rule(mut self, pattern: impl Into<String>, verdict: Label) -> Self {
        self.rules.push(MockRule {
            pattern: pattern.into(),
            verdict,
        });
        self
    }

    pub fn decide(&self, query: &str) -> Label {
        self.rules
            .iter()
            .find(|r| query.contains(&r.pattern))
            .map_or(self.default, |r| r.verdict)
    }
}

fn case_verdict(prompt: &PromptText) -> Option<Label> {
    let query = normalize_text(&prompt.query);
    prompt.text.lines().find_map(|line| {
        let (num, rest) = line.split_once(". ")?;
        if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let (utterance, label) = rest.rsplit_once(" → ")?;
        (normalize_text(utterance) == query).then(|| label.parse().ok())?
    })
}

/// First matching rule against the prompt's query decides; latency is 0.
pub fn mock_classify(rules: &MockRules, prompt: &PromptText) -> BackendResponse {
    let label = rules
        .follow_cases
        .then(|| case_verdict(prompt))
        .flatten()
        .unwrap_or_else(|| rules.decide(&prompt.query));
    BackendResponse {
        raw_text: render_verdict(label),
        latency_ms: 0,
        attempts: 1,
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    rules: MockRules,
}

impl MockBackend {
    pub fn new(rules: MockRules) -> Self {
        Self { rules }
    }

    pub fn rules(&self) -> &MockRules {
        &self.rules
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn classify(&self, prompt: &PromptText) -> Result<BackendResponse, BackendError> {
        Ok(mock_classify(&self.rules, prompt))
    }

    async fn probe(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!(
            "mock:{}",
            serde_json::to_string(&self.rules).expect("mock rules serialize")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::PromptMode;

    fn prompt(query: &str) -> PromptText {
        PromptText {
            text: format!("rules...\nText: {query}"),
            mode: PromptMode::Generic,
            case_count: 0,
            history_turns: 0,
            query: query.into(),
        }
    }

    #[test]
    fn mock_rule_table() {
        let rules = MockRules::always(Label::Reject).rule("关掉", Label::Accept);
        assert_eq!(mock_classify(&rules, &prompt("关掉空调")).raw_text, r#"{"result":"YES"}"#);
        assert_eq!(mock_classify(&rules, &prompt("好天气")).raw_text, r#"{"result":"NO"}"#);
        let always = MockRules::always(Label::Accept);
        assert_eq!(mock_classify(&always, &prompt("anything")).raw_text, r#"{"result":"YES"}"#);
        let r = mock_classify(&rules, &prompt("关掉空调"));
        assert_eq!((r.latency_ms, r.attempts), (0, 1));
        // Only the query section counts, not the surrounding template.
        let mut p = prompt("好天气");
        p.text.push_str(" 关掉");
        assert_eq!(mock_classify(&rules, &p).raw_text, r#"{"result":"NO"}"#);
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        let c = BackendConfig { timeout_ms: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = BackendConfig { max_retries: 6, ..Default::default() };
        assert!(c.validate().is_err());
        let c = BackendConfig { temperature: -0.1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = BackendConfig { base_url: "ftp://x".into(), ..Default::default() };
        assert!(c.validate().is_err());
        let c = BackendConfig { retry_base_delay_ms: 100, ..Default::default() };
        assert_eq!(c.backoff_cap(0), Duration::from_millis(100));
        assert_eq!(c.backoff_cap(3), Duration::from_millis(800));
    }

    #[test]
    fn request_body_shape() {
        let b = ChatCompletionsBackend::new(BackendConfig {
            seed: Some(7),
            ..Default::default()
        })
        .unwrap();
        let body = b.request_body(&prompt("q"));
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "rules...\nText: q");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["seed"], 7);
        assert!(!format!("{b:?}").contains("sk-"));
    }
}
