//! Persisted record of every backend exchange in a run.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::CompletionRecord;

/// Pipeline stage that issued a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Answer,
    Verification,
    Retriever,
    Verifier,
    Extractor,
    Reasoner,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Answer => "answer",
            Stage::Verification => "verification",
            Stage::Retriever => "retriever",
            Stage::Verifier => "verifier",
            Stage::Extractor => "extractor",
            Stage::Reasoner => "reasoner",
        })
    }
}

/// Where a completion request comes from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallContext {
    pub run_index: u32,
    pub question_id: String,
    pub stage: Stage,
    /// Disambiguates repeated calls within a stage (retriever batch, extractor
    /// candidate id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CallContext {
    pub fn new(run_index: u32, question_id: impl Into<String>, stage: Stage) -> Self {
        Self { run_index, question_id: question_id.into(), stage, detail: None }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(flatten)]
    pub context: CallContext,
    #[serde(flatten)]
    pub record: CompletionRecord,
}

pub fn write_transcript<'a>(
    entries: impl IntoIterator<Item = &'a TranscriptEntry>,
    mut writer: impl Write,
) -> std::io::Result<()> {
    for entry in entries {
        let line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn read_transcript(path: impl AsRef<Path>) -> std::io::Result<Vec<TranscriptEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("transcript line {}: {e}", i + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}
