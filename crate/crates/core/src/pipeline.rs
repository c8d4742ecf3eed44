//! One rejection decision end to end, plus the feedback loop into the KB.
//!
//! `decide` runs: recent history (tier 2) → knowledge-base retrieval (tier 3)
//! → prompt → classifier → verdict parse → memory write. Backend and parse
//! faults never surface as errors; the configured failure policy supplies the
//! verdict and the decision is marked degraded.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::corpus::{DialogueTurn, Label, Timestamp, TAXONOMY};
use crate::kb::{BadCase, KnowledgeBase, NewBadCase, RetrievalHit, DEFAULT_TOP_K};
use crate::memory::{MemoryStore, WindowPolicy};
use crate::prompting::{
    parse_verdict, render_rules, Locale, ParseMode, PromptBuilder, PromptError, PromptMode, PromptTemplate,
    RuleSet, MAX_PROMPT_CASES,
};
use crate::store::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Decline the utterance when the classifier is unavailable.
    #[default]
    FailReject,
    FailAccept,
    /// No substitute verdict; `decide` returns [`PipelineError::BackendUnavailable`].
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: PromptMode,
    pub window: WindowPolicy,
    pub k: usize,
    pub failure_policy: FailurePolicy,
    /// When set, a response that is not exactly one `{"result": …}` object is a
    /// parse failure. Otherwise a tolerant extraction is attempted and counted.
    pub strict_parse: bool,
    pub locale: Locale,
    pub include_assistant_turns: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::WithHistoryAndCases,
            window: WindowPolicy::default(),
            k: DEFAULT_TOP_K,
            failure_policy: FailurePolicy::FailReject,
            strict_parse: false,
            locale: Locale::Zh,
            include_assistant_turns: true,
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mode: PromptMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 || self.k > MAX_PROMPT_CASES {
            return Err(PipelineError::Config(format!(
                "k must be between 1 and {MAX_PROMPT_CASES}, got {}",
                self.k
            )));
        }
        self.window.validate().map_err(PipelineError::Config)
    }
}

/// How the classifier output was turned into a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Strict,
    TolerantFallback,
    Failed,
    /// No classifier call was made.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Backend,
    Parse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    /// The endpoint could not be reached at all (transport error or timeout).
    pub unreachable: bool,
    pub message: String,
}

/// A retrieved bad case as recorded in decision evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCase {
    pub case_id: String,
    pub utterance: String,
    pub corrected_label: Label,
    pub created_at: Timestamp,
    pub similarity: f64,
}

impl From<&RetrievalHit> for RetrievedCase {
    fn from(hit: &RetrievalHit) -> Self {
        Self {
            case_id: hit.case.case_id.clone(),
            utterance: hit.case.utterance.clone(),
            corrected_label: hit.case.corrected_label,
            created_at: hit.case.created_at,
            similarity: hit.similarity,
        }
    }
}

/// Verdict plus the evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Label,
    pub mode: PromptMode,
    pub retrieved: Vec<RetrievedCase>,
    pub history_used: usize,
    pub backend_latency_ms: u64,
    pub attempts: u32,
    pub degraded: bool,
    pub parse: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    /// SHA-256 of the final prompt text; empty when no prompt was built.
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// One line of the service decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub request_id: String,
    pub household_id: String,
    pub text: String,
    pub timestamp: Timestamp,
    pub decision: Decision,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("classifier unavailable and no failure policy applies: {0}")]
    BackendUnavailable(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn prompt_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub struct Pipeline {
    config: PipelineConfig,
    builder: PromptBuilder,
    rules: RuleSet,
    memory: Arc<MemoryStore>,
    kb: Arc<KnowledgeBase>,
    backend: Arc<dyn Backend>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("config", &self.config)
            .field("backend", &self.backend.describe())
            .finish()
    }
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        memory: Arc<MemoryStore>,
        kb: Arc<KnowledgeBase>,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, PipelineError> {
        let template = PromptTemplate::builtin(config.locale);
        Self::with_template(config, template, memory, kb, backend)
    }

    pub fn with_template(
        config: PipelineConfig,
        template: PromptTemplate,
        memory: Arc<MemoryStore>,
        kb: Arc<KnowledgeBase>,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let rules = render_rules(&TAXONOMY, config.locale)?;
        let mut builder = PromptBuilder::with_template(config.locale, template);
        builder.include_assistant_turns = config.include_assistant_turns;
        Ok(Self {
            config,
            builder,
            rules,
            memory,
            kb,
            backend,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn memory(&self) -> &Arc<MemoryStore> {
        &self.memory
    }

    pub fn kb(&self) -> &Arc<KnowledgeBase> {
        &self.kb
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub async fn decide(&self, household_id: &str, text: &str, now: Timestamp) -> Result<Decision, PipelineError> {
        self.decide_in(&self.memory, household_id, text, now).await
    }

    /// `decide` against an explicit memory store (used by isolated evaluation).
    pub(crate) async fn decide_in(
        &self,
        memory: &MemoryStore,
        household_id: &str,
        text: &str,
        now: Timestamp,
    ) -> Result<Decision, PipelineError> {
        let mode = self.config.mode;
        let query = text.trim();
        if query.is_empty() {
            return Ok(Decision {
                verdict: Label::Reject,
                mode,
                retrieved: Vec::new(),
                history_used: 0,
                backend_latency_ms: 0,
                attempts: 0,
                degraded: false,
                parse: ParseStatus::Skipped,
                failure: None,
                prompt_hash: String::new(),
                raw_response: None,
                reason: Some("empty".into()),
            });
        }

        let history: Vec<DialogueTurn> = if mode.uses_history() {
            memory.recent_history(household_id, now, &self.config.window)
        } else {
            Vec::new()
        };
        let hits = if mode.uses_cases() {
            self.kb.retrieve_top_k(household_id, query, self.config.k)
        } else {
            Vec::new()
        };
        let cases: Vec<BadCase> = hits.iter().map(|h| h.case.clone()).collect();
        let prompt = self.builder.build(mode, &self.rules, query, &history, &cases)?;
        let hash = prompt_hash(&prompt.text);

        let (outcome, latency_ms, attempts, raw_response) = match self.backend.classify(&prompt).await {
            Ok(resp) => {
                let outcome = self.parse(&resp.raw_text);
                (outcome, resp.latency_ms, resp.attempts, Some(resp.raw_text))
            }
            Err(e) => (Err(backend_failure(&e)), 0, 0, None),
        };

        if let Err(e) = memory.append_turn(household_id, DialogueTurn::user(query).at(now)) {
            tracing::warn!(household_id, error = %e, "failed to record user turn");
        }

        let (verdict, parse, failure) = match outcome {
            Ok((label, status)) => (label, status, None),
            Err(failure) => {
                tracing::warn!(household_id, kind = ?failure.kind, message = %failure.message, "degraded decision");
                let status = match failure.kind {
                    FailureKind::Parse => ParseStatus::Failed,
                    FailureKind::Backend => ParseStatus::Skipped,
                };
                let label = match self.config.failure_policy {
                    FailurePolicy::FailReject => Label::Reject,
                    FailurePolicy::FailAccept => Label::Accept,
                    FailurePolicy::Disabled => return Err(PipelineError::BackendUnavailable(failure.message)),
                };
                (label, status, Some(failure))
            }
        };

        Ok(Decision {
            verdict,
            mode,
            retrieved: hits.iter().map(RetrievedCase::from).collect(),
            history_used: prompt.history_turns,
            backend_latency_ms: latency_ms,
            attempts,
            degraded: failure.is_some(),
            parse,
            failure,
            prompt_hash: hash,
            raw_response,
            reason: None,
        })
    }

    fn parse(&self, raw: &str) -> Result<(Label, ParseStatus), Failure> {
        match parse_verdict(raw, ParseMode::Strict) {
            Ok(v) => Ok((v.label, ParseStatus::Strict)),
            Err(strict_err) => {
                if self.config.strict_parse {
                    return Err(parse_failure(strict_err.to_string()));
                }
                parse_verdict(raw, ParseMode::Tolerant)
                    .map(|v| (v.label, ParseStatus::TolerantFallback))
                    .map_err(|e| parse_failure(e.to_string()))
            }
        }
    }

    /// Stores a correction in the household KB. No-op when the prediction was right.
    pub fn record_feedback(
        &self,
        household_id: &str,
        utterance: &str,
        predicted: Label,
        corrected: Label,
        now: Timestamp,
    ) -> Result<bool, PipelineError> {
        if predicted == corrected {
            return Ok(false);
        }
        Ok(self.kb.add_case(NewBadCase {
            household_id: household_id.to_string(),
            utterance: utterance.trim().to_string(),
            corrected_label: corrected,
            created_at: now,
        })?)
    }

    /// Records what the downstream assistant answered to an accepted utterance.
    pub fn record_assistant_reply(&self, household_id: &str, reply: &str, now: Timestamp) -> Result<usize, PipelineError> {
        Ok(self
            .memory
            .append_turn(household_id, DialogueTurn::assistant(reply.trim()).at(now))?)
    }
}

fn parse_failure(message: String) -> Failure {
    Failure {
        kind: FailureKind::Parse,
        unreachable: false,
        message,
    }
}

fn backend_failure(e: &BackendError) -> Failure {
    Failure {
        kind: FailureKind::Backend,
        unreachable: e.is_unreachable(),
        message: e.to_string(),
    }
}
