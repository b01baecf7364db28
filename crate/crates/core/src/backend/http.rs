use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{request_digest, BackendError, CompletionRecord, ModelBackend, SamplingParams};
use crate::prompts::MessageSequence;
use crate::transcript::CallContext;

fn default_api_key_env() -> Option<String> {
    Some("EXAMEVAL_API_KEY".to_string())
}

fn default_max_attempts() -> u32 {
    3
}

fn default_base_delay_ms() -> u64 {
    500
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_true() -> bool {
    true
}

/// Remote chat-completion endpoint settings. The API token itself is read
/// from the environment variable named by `api_key_env` and never stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_delay_ms")]
    pub base_delay_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_true")]
    pub supports_system_role: bool,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: default_api_key_env(),
            max_attempts: default_max_attempts(),
            base_delay_ms: default_base_delay_ms(),
            timeout_secs: default_timeout_secs(),
            supports_system_role: true,
        }
    }
}

/// Client for an OpenAI-style `chat/completions` endpoint.
///
/// Transport errors, HTTP 429 and 5xx responses are retried up to
/// `max_attempts` times with exponential backoff plus jitter. Every attempt
/// carries the request digest as its idempotency key.
pub struct HttpBackend {
    config: HttpConfig,
    name: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

enum Failure {
    Retry(BackendError),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        if config.max_attempts == 0 {
            return Err(BackendError::Config("max_attempts must be at least 1".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => None,
            },
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { name: format!("http:{}", config.model), config, api_key, client })
    }

    fn body(&self, messages: &MessageSequence, params: &SamplingParams) -> Value {
        let messages: Vec<Value> = messages
            .messages()
            .iter()
            .map(|m| json!({ "role": m.role.as_str(), "content": m.content }))
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value, digest: &str, attempt: u32) -> Result<(String, bool), Failure> {
        let mut request = self.client.post(&self.config.endpoint).header("Idempotency-Key", digest).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            Failure::Retry(BackendError::Transport { attempts: attempt, message: e.to_string() })
        })?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(Failure::Retry(BackendError::RateLimited { attempts: attempt }));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            let err = BackendError::Status { status: status.as_u16(), body };
            return Err(if status.is_server_error() { Failure::Retry(err) } else { Failure::Fatal(err) });
        }
        let value: Value = response
            .json()
            .map_err(|e| Failure::Fatal(BackendError::InvalidResponse(e.to_string())))?;
        parse_chat_response(&value).map_err(Failure::Fatal)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.base_delay_ms;
        let exp = base.saturating_mul(1u64 << (attempt - 1).min(16));
        let jitter = if base > 0 { rand::rng().random_range(0..=base / 2) } else { 0 };
        Duration::from_millis(exp + jitter)
    }
}

/// Extracts `(content, truncated)` from a chat-completion response body.
pub(crate) fn parse_chat_response(value: &Value) -> Result<(String, bool), BackendError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::InvalidResponse("no choices in response".into()))?;
    let content = match choice.get("message").and_then(|m| m.get("content")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => return Err(BackendError::InvalidResponse(format!("unexpected content {other}"))),
    };
    let truncated = choice.get("finish_reason").and_then(Value::as_str) == Some("length");
    Ok((content, truncated))
}

impl ModelBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_system_role(&self) -> bool {
        self.config.supports_system_role
    }

    fn complete(
        &self,
        _context: &CallContext,
        messages: &MessageSequence,
        params: &SamplingParams,
    ) -> Result<CompletionRecord, BackendError> {
        let digest = request_digest(&self.name, messages, params);
        let body = self.body(messages, params);
        let started = Instant::now();
        let mut attempt = 1;
        loop {
            match self.attempt(&body, &digest, attempt) {
                Ok((response, truncated)) => {
                    return Ok(CompletionRecord {
                        backend: self.name.clone(),
                        digest,
                        messages: messages.clone(),
                        params: params.clone(),
                        response,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                        truncated,
                    })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(e)) if attempt >= self.config.max_attempts => return Err(e),
                Err(Failure::Retry(_)) => {
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }
}
