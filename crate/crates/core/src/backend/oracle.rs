use std::collections::HashMap;

use super::{request_digest, BackendError, CompletionRecord, ModelBackend, SamplingParams};
use crate::dataset::ExamDataset;
use crate::prompts::{render_question, AgentRole, MessageSequence, PromptBuilder, PromptKind};
use crate::transcript::CallContext;

/// Ground-truth backend: answers any answer-producing prompt with the key of
/// the question it asks about.
///
/// Retriever, verifier and extractor prompts get an empty reply, which selects
/// no candidates.
pub struct OracleBackend {
    prompts: PromptBuilder,
    keys: HashMap<String, String>,
}

impl OracleBackend {
    pub fn new(dataset: &ExamDataset, prompts: PromptBuilder) -> Self {
        let keys = dataset.questions.iter().map(|q| (render_question(q), q.key.render())).collect();
        Self { prompts, keys }
    }
}

impl ModelBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(
        &self,
        context: &CallContext,
        messages: &MessageSequence,
        params: &SamplingParams,
    ) -> Result<CompletionRecord, BackendError> {
        let response = match self.prompts.classify(messages) {
            Some(PromptKind::Answer | PromptKind::Verification | PromptKind::Agent(AgentRole::Reasoner)) => {
                let text = self
                    .prompts
                    .extract_slot(messages, "question")
                    .ok_or_else(|| BackendError::Oracle(format!("no question slot in prompt for {}", context.question_id)))?;
                self.keys
                    .get(&text)
                    .cloned()
                    .ok_or_else(|| BackendError::Oracle(format!("question {} is not in the oracle's dataset", context.question_id)))?
            }
            Some(PromptKind::Agent(_)) => String::new(),
            None => return Err(BackendError::Oracle(format!("unrecognised prompt for {}", context.question_id))),
        };
        Ok(CompletionRecord {
            backend: self.name().to_string(),
            digest: request_digest(self.name(), messages, params),
            messages: messages.clone(),
            params: params.clone(),
            response,
            latency_ms: 0,
            attempt_count: 1,
            truncated: false,
        })
    }
}
