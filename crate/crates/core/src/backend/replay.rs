use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;

use super::{request_digest, BackendError, CompletionRecord, ModelBackend, SamplingParams};
use crate::prompts::MessageSequence;
use crate::transcript::{read_transcript, CallContext, TranscriptEntry};

type ReplayKey = (CallContext, String);

/// Serves completions from a stored transcript and never reaches a live
/// model. Records are matched on call context plus request digest; a request
/// with no record is an error.
pub struct ReplayBackend {
    records: HashMap<ReplayKey, Vec<CompletionRecord>>,
    names: BTreeSet<String>,
    cursors: Mutex<HashMap<ReplayKey, usize>>,
}

/// Loads a transcript file into a replay backend.
pub fn replay_store(path: impl AsRef<Path>) -> Result<ReplayBackend, BackendError> {
    let path = path.as_ref();
    let entries = read_transcript(path)
        .map_err(|e| BackendError::Transcript { path: path.display().to_string(), message: e.to_string() })?;
    Ok(ReplayBackend::from_entries(entries))
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut records: HashMap<ReplayKey, Vec<CompletionRecord>> = HashMap::new();
        let mut names = BTreeSet::new();
        for entry in entries {
            names.insert(entry.record.backend.clone());
            records.entry((entry.context, entry.record.digest.clone())).or_default().push(entry.record);
        }
        Self { records, names, cursors: Mutex::new(HashMap::new()) }
    }

    /// Names of the backends that produced the stored records.
    pub fn recorded_backends(&self) -> &BTreeSet<String> {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl ModelBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(
        &self,
        context: &CallContext,
        messages: &MessageSequence,
        params: &SamplingParams,
    ) -> Result<CompletionRecord, BackendError> {
        // The original backend may have folded the system role into the user turn.
        let folded = messages.fold_system();
        let mut first_digest = None;
        for candidate in [messages, &folded] {
            for name in &self.names {
                let digest = request_digest(name, candidate, params);
                first_digest.get_or_insert_with(|| digest.clone());
                let key = (context.clone(), digest);
                if let Some(stored) = self.records.get(&key) {
                    let mut cursors = self.cursors.lock().expect("replay cursor poisoned");
                    let cursor = cursors.entry(key).or_insert(0);
                    if let Some(record) = stored.get(*cursor) {
                        *cursor += 1;
                        return Ok(record.clone());
                    }
                }
            }
        }
        Err(BackendError::ReplayMiss {
            question_id: context.question_id.clone(),
            stage: context.stage,
            digest: first_digest.unwrap_or_else(|| request_digest("", messages, params)),
        })
    }
}
