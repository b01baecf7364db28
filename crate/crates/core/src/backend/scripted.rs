use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{request_digest, BackendError, CompletionRecord, ModelBackend, SamplingParams};
use crate::prompts::{MessageSequence, PromptBuilder, PromptKind};
use crate::transcript::{CallContext, Stage};

/// What a scripted responder sees for one call.
pub struct ScriptCall<'a> {
    pub context: &'a CallContext,
    pub messages: &'a MessageSequence,
    prompts: &'a PromptBuilder,
}

impl ScriptCall<'_> {
    pub fn kind(&self) -> Option<PromptKind> {
        self.prompts.classify(self.messages)
    }

    /// Text in the answer slot of a verification prompt.
    pub fn answer_slot(&self) -> Option<String> {
        self.prompts.extract_slot(self.messages, "answer")
    }

    pub fn question_slot(&self) -> Option<String> {
        self.prompts.extract_slot(self.messages, "question")
    }
}

type Responder = Box<dyn Fn(&ScriptCall<'_>) -> Option<String> + Send + Sync>;

/// Deterministic backend driven by programmed responses.
///
/// Responders are tried in registration order; the first one that answers
/// wins. A call nobody answers is an error.
pub struct ScriptedBackend {
    name: String,
    prompts: PromptBuilder,
    responders: Vec<Responder>,
    calls: Mutex<Vec<CallContext>>,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>) -> Self {
        Self::with_prompts(name, PromptBuilder::default())
    }

    pub fn with_prompts(name: impl Into<String>, prompts: PromptBuilder) -> Self {
        Self { name: name.into(), prompts, responders: Vec::new(), calls: Mutex::new(Vec::new()) }
    }

    /// Fixed response for `stage`, optionally restricted to one question.
    pub fn respond(self, stage: Stage, question_id: Option<&str>, response: impl Into<String>) -> Self {
        let response = response.into();
        let question_id = question_id.map(str::to_string);
        self.with(move |call| {
            let matches = call.context.stage == stage
                && question_id.as_ref().is_none_or(|id| *id == call.context.question_id);
            matches.then(|| response.clone())
        })
    }

    /// Successive matching calls get successive responses; the last repeats.
    pub fn sequence(self, stage: Stage, question_id: Option<&str>, responses: Vec<String>) -> Self {
        assert!(!responses.is_empty(), "a response sequence needs at least one entry");
        let question_id = question_id.map(str::to_string);
        let next = AtomicUsize::new(0);
        self.with(move |call| {
            let matches = call.context.stage == stage
                && question_id.as_ref().is_none_or(|id| *id == call.context.question_id);
            matches.then(|| {
                let i = next.fetch_add(1, Ordering::SeqCst).min(responses.len() - 1);
                responses[i].clone()
            })
        })
    }

    pub fn with(mut self, responder: impl Fn(&ScriptCall<'_>) -> Option<String> + Send + Sync + 'static) -> Self {
        self.responders.push(Box::new(responder));
        self
    }

    /// Contexts of every call received so far, in arrival order.
    pub fn calls(&self) -> Vec<CallContext> {
        self.calls.lock().expect("call log poisoned").clone()
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(
        &self,
        context: &CallContext,
        messages: &MessageSequence,
        params: &SamplingParams,
    ) -> Result<CompletionRecord, BackendError> {
        self.calls.lock().expect("call log poisoned").push(context.clone());
        let call = ScriptCall { context, messages, prompts: &self.prompts };
        let response = self
            .responders
            .iter()
            .find_map(|r| r(&call))
            .ok_or_else(|| BackendError::Unscripted { question_id: context.question_id.clone(), stage: context.stage })?;
        Ok(CompletionRecord {
            backend: self.name.clone(),
            digest: request_digest(&self.name, messages, params),
            messages: messages.clone(),
            params: params.clone(),
            response,
            latency_ms: 0,
            attempt_count: 1,
            truncated: false,
        })
    }
}
