//! The model interface and its implementations.
//!
//! Every backend completes a [`MessageSequence`] under [`SamplingParams`] and
//! returns a [`CompletionRecord`]. The request digest, a SHA-256 over backend
//! name, messages and parameters, identifies a request for replay and serves
//! as the idempotency key for remote retries.

mod http;
mod oracle;
mod replay;
mod scripted;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use oracle::OracleBackend;
pub use replay::{replay_store, ReplayBackend};
pub use scripted::{ScriptCall, ScriptedBackend};

use crate::dataset::ExamDataset;
use crate::prompts::{MessageSequence, PromptBuilder};
use crate::transcript::{CallContext, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_output_tokens: 1024, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub backend: String,
    pub digest: String,
    pub messages: MessageSequence,
    pub params: SamplingParams,
    /// Response text exactly as returned.
    pub response: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("completion request has no messages")]
    EmptyRequest,
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    InvalidResponse(String),
    #[error("no recorded response for question {question_id} ({stage}, digest {digest})")]
    ReplayMiss { question_id: String, stage: Stage, digest: String },
    #[error("no scripted response for question {question_id} ({stage})")]
    Unscripted { question_id: String, stage: Stage },
    #[error("oracle cannot answer: {0}")]
    Oracle(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("cannot read transcript {path}: {message}")]
    Transcript { path: String, message: String },
}

pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn supports_system_role(&self) -> bool {
        true
    }

    /// Completes `messages`. Implementations must tolerate concurrent calls.
    fn complete(
        &self,
        context: &CallContext,
        messages: &MessageSequence,
        params: &SamplingParams,
    ) -> Result<CompletionRecord, BackendError>;
}

/// Stable hash of a request; the replay key and idempotency token.
pub fn request_digest(backend: &str, messages: &MessageSequence, params: &SamplingParams) -> String {
    let canonical = serde_json::json!({
        "backend": backend,
        "messages": messages,
        "params": params,
    });
    crate::digest::sha256_hex(canonical.to_string())
}

/// Checks the request, adapts it to the backend's capabilities and completes it.
pub fn complete(
    backend: &dyn ModelBackend,
    context: &CallContext,
    messages: &MessageSequence,
    params: &SamplingParams,
) -> Result<CompletionRecord, BackendError> {
    if messages.is_empty() {
        return Err(BackendError::EmptyRequest);
    }
    if backend.supports_system_role() {
        backend.complete(context, messages, params)
    } else {
        backend.complete(context, &messages.fold_system(), params)
    }
}

/// Serializable backend selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Answers every question with its key.
    Oracle,
    /// Serves responses from a stored transcript.
    Replay { transcript: PathBuf },
    /// Generic chat-completion endpoint.
    Http(HttpConfig),
}

impl BackendSpec {
    /// `oracle`, `replay:<path>` or `http`.
    pub fn parse_cli(text: &str, http: Option<HttpConfig>) -> Result<Self, String> {
        match text {
            "oracle" => Ok(BackendSpec::Oracle),
            "http" => http
                .map(BackendSpec::Http)
                .ok_or_else(|| "http backend needs an endpoint and a model".to_string()),
            other => match other.strip_prefix("replay:") {
                Some(path) if !path.is_empty() => Ok(BackendSpec::Replay { transcript: PathBuf::from(path) }),
                _ => Err(format!("unknown backend {other:?} (expected oracle, replay:<transcript> or http)")),
            },
        }
    }
}

pub fn build_backend(
    spec: &BackendSpec,
    prompts: &PromptBuilder,
    dataset: &ExamDataset,
) -> Result<Arc<dyn ModelBackend>, BackendError> {
    Ok(match spec {
        BackendSpec::Oracle => Arc::new(OracleBackend::new(dataset, prompts.clone())),
        BackendSpec::Replay { transcript } => Arc::new(replay_store(transcript)?),
        BackendSpec::Http(config) => Arc::new(HttpBackend::new(config.clone())?),
    })
}
