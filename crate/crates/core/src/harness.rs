//! End-to-end runs: configuration, run directories and replay.
//!
//! A run directory holds:
//!
//! ```text
//! config.json       resolved configuration, fingerprint, template hashes
//! transcript.jsonl  every backend exchange
//! attempts.jsonl    initial and final answer per question and repeat
//! scores.jsonl      graded exam per repeat
//! answers-rN.tsv    final answers of repeat N, scoreable on their own
//! summary.json      summary line, compared byte for byte on replay
//! summary.txt       result table
//! summary.md        result table
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer_format::{parse_answer, parse_answer_lenient, Prediction};
use crate::backend::{build_backend, BackendError, BackendSpec};
use crate::dataset::{load_dataset, split_by_year, DatasetError, ExamDataset, Year};
use crate::digest::sha256_hex;
use crate::pipeline::{run_evaluation, AnswerAttempt, Backends, EvaluationRun, PipelineConfig, PipelineError, RoleBackends};
use crate::prompts::{PromptBuilder, PromptError, PromptOptions, TemplateRegistry};
use crate::report::{render, summarize, EvaluationSummary, ReportError, ReportFormat};
use crate::scoring::{grade_exam, GradedExam, PassRule, ScoringError};
use crate::transcript::write_transcript;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("no active questions for test years {0}")]
    NoTestQuestions(String),
    #[error("dataset content changed since the run was recorded (recorded {recorded}, found {found})")]
    DatasetChanged { recorded: String, found: String },
    #[error("replay failed: {0}")]
    Replay(String),
    #[error("answers file line {line}: {message}")]
    Answers { line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Backend per multi-agent role, for separate mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleBackendSpecs {
    pub retriever: BackendSpec,
    pub verifier: BackendSpec,
    pub extractor: BackendSpec,
    pub reasoner: BackendSpec,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Model name shown in reports. Defaults to the backend name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub dataset: PathBuf,
    pub test_years: BTreeSet<Year>,
    pub backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_backends: Option<RoleBackendSpecs>,
    /// Directory overriding the built-in templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub prompt: PromptOptions,
    pub pipeline: PipelineConfig,
}

/// The resolved configuration as stored in `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub label: String,
    pub fingerprint: String,
    pub dataset_digest: String,
    pub template_hashes: BTreeMap<String, String>,
    pub config: RunConfig,
}

/// Short digest over the configuration, template texts and dataset content.
pub fn config_fingerprint(
    config: &RunConfig,
    template_hashes: &BTreeMap<String, String>,
    dataset_digest: &str,
) -> String {
    let payload = serde_json::json!({
        "config": config,
        "templates": template_hashes,
        "dataset": dataset_digest,
    });
    let mut digest = sha256_hex(payload.to_string());
    digest.truncate(16);
    digest
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub snapshot: RunSnapshot,
    pub run: EvaluationRun,
    pub summary: EvaluationSummary,
}

struct Prepared {
    dataset: ExamDataset,
    prompts: PromptBuilder,
    snapshot: RunSnapshot,
}

fn prepare(config: &RunConfig) -> Result<Prepared, HarnessError> {
    let dataset = load_dataset(&config.dataset)?;
    let registry = match &config.templates {
        Some(dir) => TemplateRegistry::load_dir(dir)?,
        None => TemplateRegistry::builtin(),
    };
    let prompts = PromptBuilder::new(registry, config.prompt);
    let template_hashes = prompts.templates().hashes();
    let dataset_digest = dataset.content_digest();
    let fingerprint = config_fingerprint(config, &template_hashes, &dataset_digest);
    let label = config.label.clone().unwrap_or_else(|| backend_label(&config.backend));
    Ok(Prepared {
        dataset,
        prompts,
        snapshot: RunSnapshot { label, fingerprint, dataset_digest, template_hashes, config: config.clone() },
    })
}

fn backend_label(spec: &BackendSpec) -> String {
    match spec {
        BackendSpec::Oracle => "oracle".into(),
        BackendSpec::Replay { .. } => "replay".into(),
        BackendSpec::Http(http) => http.model.clone(),
    }
}

fn evaluate(prepared: &Prepared, config: &RunConfig) -> Result<EvaluationRun, HarnessError> {
    let split = split_by_year(&prepared.dataset, &config.test_years)?;
    if split.test.active().next().is_none() {
        let years: Vec<String> = config.test_years.iter().map(ToString::to_string).collect();
        return Err(HarnessError::NoTestQuestions(years.join(", ")));
    }
    let build = |spec: &BackendSpec| build_backend(spec, &prepared.prompts, &split.test);
    let roles = match &config.role_backends {
        Some(specs) => Some(RoleBackends {
            retriever: build(&specs.retriever)?,
            verifier: build(&specs.verifier)?,
            extractor: build(&specs.extractor)?,
            reasoner: build(&specs.reasoner)?,
        }),
        None => None,
    };
    let backends = Backends { primary: build(&config.backend)?, roles };
    Ok(run_evaluation(&split.test, &split.train, &config.pipeline, &backends, &prepared.prompts)?)
}

/// Loads the dataset, builds backends and runs every repeat.
pub fn execute_run(config: &RunConfig) -> Result<RunOutcome, HarnessError> {
    let prepared = prepare(config)?;
    let run = evaluate(&prepared, config)?;
    let summary = summarize(&run, &prepared.snapshot.label, &prepared.snapshot.fingerprint)?;
    Ok(RunOutcome { snapshot: prepared.snapshot, run, summary })
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    write(&mut writer).and_then(|_| writer.flush()).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, items: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    for item in items {
        writeln!(w, "{}", serde_json::to_string(&item).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    run_index: u32,
    #[serde(flatten)]
    graded: &'a GradedExam,
}

pub fn summary_json(summary: &EvaluationSummary) -> String {
    render(std::slice::from_ref(summary), ReportFormat::Jsonl, None)
}

/// Writes all run artifacts into `dir`, creating it if needed.
pub fn write_run_dir(dir: &Path, outcome: &RunOutcome) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rule = &outcome.snapshot.config.pipeline.pass_rule;
    write_file(&dir.join("config.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &outcome.snapshot).map_err(std::io::Error::other)?;
        writeln!(w)
    })?;
    write_file(&dir.join("transcript.jsonl"), |w| write_transcript(outcome.run.transcript(), w))?;
    write_file(&dir.join("attempts.jsonl"), |w| {
        write_jsonl(w, outcome.run.repeats.iter().flat_map(|r| r.attempts.iter()))
    })?;
    write_file(&dir.join("scores.jsonl"), |w| {
        write_jsonl(w, outcome.run.repeats.iter().map(|r| ScoreLine { run_index: r.run_index, graded: &r.graded }))
    })?;
    for repeat in &outcome.run.repeats {
        write_file(&dir.join(format!("answers-r{}.tsv", repeat.run_index)), |w| write_answers(&repeat.attempts, w))?;
    }
    let summaries = std::slice::from_ref(&outcome.summary);
    write_file(&dir.join("summary.json"), |w| w.write_all(summary_json(&outcome.summary).as_bytes()))?;
    write_file(&dir.join("summary.txt"), |w| w.write_all(render(summaries, ReportFormat::Text, Some(rule)).as_bytes()))?;
    write_file(&dir.join("summary.md"), |w| {
        w.write_all(render(summaries, ReportFormat::Markdown, Some(rule)).as_bytes())
    })
}

pub fn read_snapshot(dir: &Path) -> Result<RunSnapshot, HarnessError> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format { path, message: e.to_string() })
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub outcome: RunOutcome,
    pub stored_summary: String,
    pub replayed_summary: String,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.stored_summary == self.replayed_summary
    }
}

/// Re-runs a recorded run from its transcript. `dataset` overrides the
/// recorded dataset path; its content must match the recorded digest.
pub fn replay_run_dir(dir: &Path, dataset: Option<&Path>) -> Result<ReplayOutcome, HarnessError> {
    let snapshot = read_snapshot(dir)?;
    let mut config = snapshot.config.clone();
    if let Some(path) = dataset {
        config.dataset = path.to_path_buf();
    }
    let replay = BackendSpec::Replay { transcript: dir.join("transcript.jsonl") };
    config.backend = replay.clone();
    if config.role_backends.is_some() {
        config.role_backends = Some(RoleBackendSpecs {
            retriever: replay.clone(),
            verifier: replay.clone(),
            extractor: replay.clone(),
            reasoner: replay,
        });
    }
    let prepared = prepare(&config)?;
    if prepared.snapshot.dataset_digest != snapshot.dataset_digest {
        return Err(HarnessError::DatasetChanged {
            recorded: snapshot.dataset_digest,
            found: prepared.snapshot.dataset_digest,
        });
    }
    let run = evaluate(&prepared, &config)?;
    let recorded_failures = read_failures(dir)?;
    let new_failure = run
        .repeats
        .iter()
        .flat_map(|r| r.attempts.iter())
        .find(|a| a.error.is_some() && !recorded_failures.contains(&(a.run_index, a.question_id.clone())));
    if let Some(attempt) = new_failure {
        return Err(HarnessError::Replay(attempt.error.clone().unwrap_or_default()));
    }
    let summary = summarize(&run, &snapshot.label, &snapshot.fingerprint)?;
    let summary_path = dir.join("summary.json");
    let stored_summary = fs::read_to_string(&summary_path).map_err(io_err(&summary_path))?;
    let replayed_summary = summary_json(&summary);
    Ok(ReplayOutcome { outcome: RunOutcome { snapshot, run, summary }, stored_summary, replayed_summary })
}

/// Attempts that failed in the recorded run; their calls are absent from the
/// transcript.
fn read_failures(dir: &Path) -> Result<BTreeSet<(u32, String)>, HarnessError> {
    let path = dir.join("attempts.jsonl");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut failed = BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let attempt: AnswerAttempt =
            serde_json::from_str(line).map_err(|e| HarnessError::Format { path: path.clone(), message: e.to_string() })?;
        if attempt.error.is_some() {
            failed.insert((attempt.run_index, attempt.question_id));
        }
    }
    Ok(failed)
}

fn sanitize(raw: &str) -> String {
    raw.chars().map(|c| if c.is_control() { ' ' } else { c }).collect()
}

/// One `id<TAB>answer` line per attempt. Control characters in raw responses
/// become spaces.
pub fn write_answers(attempts: &[AnswerAttempt], mut w: impl Write) -> std::io::Result<()> {
    for a in attempts {
        writeln!(w, "{}\t{}", a.question_id, sanitize(&a.final_answer.answer_text()))?;
    }
    Ok(())
}

/// Reads an answers file. Blank lines and `#` comments are skipped; a line
/// without a tab is an id with an empty answer.
pub fn read_answers(reader: impl BufRead) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut answers = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| HarnessError::Answers { line: i + 1, message: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, raw) = line.split_once('\t').unwrap_or((line, ""));
        let id = id.trim();
        if answers.insert(id.to_string(), raw.to_string()).is_some() {
            return Err(HarnessError::Answers { line: i + 1, message: format!("duplicate answer for {id}") });
        }
    }
    Ok(answers)
}

pub fn load_answers(path: &Path) -> Result<BTreeMap<String, String>, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_answers(BufReader::new(file))
}

/// Parses and grades raw answers against the active questions of `dataset`.
pub fn score_answers(
    dataset: &ExamDataset,
    answers: &BTreeMap<String, String>,
    rule: &PassRule,
    lenient: bool,
) -> Result<GradedExam, HarnessError> {
    let mut predictions = BTreeMap::new();
    for (id, raw) in answers {
        let q = dataset
            .active()
            .find(|q| &q.id == id)
            .ok_or_else(|| ScoringError::UnknownQuestion(id.clone()))?;
        let parsed: Prediction = if lenient { parse_answer_lenient(raw, q.shape()) } else { parse_answer(raw, q.shape()) };
        predictions.insert(id.clone(), parsed);
    }
    Ok(grade_exam(dataset, &predictions, rule)?)
}
