//! Household-personalized query rejection for smart-home voice assistants.
//!
//! The gateway decides whether an utterance should be forwarded downstream
//! using three tiers: a generic rejection prompt built from the utterance
//! taxonomy, the household's recent dialogue history, and the most similar
//! past misjudgments from a per-household knowledge base.

pub mod backend;
pub mod corpus;
pub mod evalbench;
pub mod kb;
pub mod memory;
pub mod pipeline;
pub mod prompting;
mod store;

pub use backend::{Backend, BackendConfig, BackendError, BackendResponse, ChatCompletionsBackend, MockBackend, MockRules};
pub use corpus::{DialogueTurn, Label, Sample, Speaker, Timestamp, UtteranceType, TAXONOMY};
pub use evalbench::{EvalConfig, EvalReport, ReportFormat, SubsetResult};
pub use kb::{BadCase, HashedNgramEmbedder, KnowledgeBase, RetrievalHit};
pub use memory::{MemoryStore, WindowPolicy};
pub use pipeline::{Decision, FailurePolicy, Pipeline, PipelineConfig};
pub use prompting::{Locale, PromptBuilder, PromptMode, PromptText, Verdict};
pub use store::StoreError;
