//! Inference strategies and the repeated evaluation loop.
//!
//! Completion counts per question:
//!
//! | strategy            | completions                                   |
//! |---------------------|-----------------------------------------------|
//! | zero-shot, few-shot | 1                                             |
//! | self-verification   | inner + 1                                     |
//! | multi-agent         | retriever batches + verifier + retained + 1   |
//!
//! The verifier call is skipped when the retriever selected nothing, so with a
//! single retriever batch a multi-agent question costs `3 + retained`
//! completions whenever anything was retrieved.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer_format::{normalize_digits, parse_answer, parse_answer_lenient, Prediction};
use crate::backend::{self, BackendError, ModelBackend, SamplingParams};
use crate::dataset::{select_demonstrations, AnswerShape, DatasetError, ExamDataset, Question, Year};
use crate::prompts::{AgentBindings, AgentRole, Candidate, MessageSequence, PromptBuilder, PromptError};
use crate::scoring::{grade_exam, GradedExam, PassRule, ScoringError};
use crate::transcript::{CallContext, Stage, TranscriptEntry};

fn default_batch_size() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    /// One backend plays every role.
    Shared,
    /// Each role has its own backend.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    FewShot {
        k: usize,
        seed: u64,
    },
    /// One verification pass over the inner strategy's answer.
    SelfVerify {
        inner: Box<Strategy>,
    },
    MultiAgent {
        mode: AgentMode,
        /// Candidates shown to the retriever per call.
        #[serde(default = "default_batch_size")]
        batch_size: usize,
    },
}

impl Strategy {
    pub fn validate(&self) -> Result<(), PipelineError> {
        match self {
            Strategy::SelfVerify { inner } if matches!(**inner, Strategy::SelfVerify { .. }) => {
                Err(PipelineError::Config("self-verification cannot wrap another self-verification".into()))
            }
            Strategy::SelfVerify { inner } => inner.validate(),
            Strategy::MultiAgent { batch_size: 0, .. } => {
                Err(PipelineError::Config("multi-agent batch size must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Strategy::ZeroShot => "zero-shot".into(),
            Strategy::FewShot { k, .. } => format!("few-shot(k={k})"),
            Strategy::SelfVerify { inner } => format!("{} + self-verification", inner.label()),
            Strategy::MultiAgent { mode: AgentMode::Shared, .. } => "multi-agent(shared)".into(),
            Strategy::MultiAgent { mode: AgentMode::Separate, .. } => "multi-agent(separate)".into(),
        }
    }

    fn few_shot(&self) -> Option<(usize, u64)> {
        match self {
            Strategy::FewShot { k, seed } => Some((*k, *seed)),
            Strategy::SelfVerify { inner } => inner.few_shot(),
            _ => None,
        }
    }

    fn multi_agent(&self) -> Option<AgentMode> {
        match self {
            Strategy::MultiAgent { mode, .. } => Some(*mode),
            Strategy::SelfVerify { inner } => inner.multi_agent(),
            _ => None,
        }
    }
}

/// What to do when a question's backend call fails during an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Grade the question as an empty answer and flag the run incomplete.
    #[default]
    Record,
    /// Stop the evaluation with the error.
    Abort,
}

fn default_repeats() -> u32 {
    3
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    /// When set, repeat `r` samples with seed `run_seed + r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_seed: Option<u64>,
    #[serde(default)]
    pub sampling: SamplingParams,
    /// Maximum questions in flight at once.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Accept answers embedded in extra text. Off for official grading.
    #[serde(default)]
    pub lenient: bool,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
    #[serde(default)]
    pub pass_rule: PassRule,
}

impl PipelineConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            repeats: default_repeats(),
            run_seed: None,
            sampling: SamplingParams::default(),
            parallelism: default_parallelism(),
            lenient: false,
            failure_policy: FailurePolicy::default(),
            pass_rule: PassRule::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.repeats == 0 {
            return Err(PipelineError::Config("repeats must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be at least 1".into()));
        }
        self.strategy.validate()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("question {question_id}: {stage} stage: {source}")]
    Backend {
        question_id: String,
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("question {question_id}: {source}")]
    Prompt {
        question_id: String,
        #[source]
        source: PromptError,
    },
    #[error("leakage guard: {0}")]
    Leakage(String),
    #[error("multi-agent pipeline needs a non-empty candidate pool")]
    EmptyPool,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Backends for the four multi-agent roles.
#[derive(Clone)]
pub struct RoleBackends {
    pub retriever: Arc<dyn ModelBackend>,
    pub verifier: Arc<dyn ModelBackend>,
    pub extractor: Arc<dyn ModelBackend>,
    pub reasoner: Arc<dyn ModelBackend>,
}

impl RoleBackends {
    pub fn shared(backend: Arc<dyn ModelBackend>) -> Self {
        Self {
            retriever: backend.clone(),
            verifier: backend.clone(),
            extractor: backend.clone(),
            reasoner: backend,
        }
    }

    pub fn get(&self, role: AgentRole) -> &dyn ModelBackend {
        match role {
            AgentRole::Retriever => self.retriever.as_ref(),
            AgentRole::Verifier => self.verifier.as_ref(),
            AgentRole::Extractor => self.extractor.as_ref(),
            AgentRole::Reasoner => self.reasoner.as_ref(),
        }
    }
}

/// Backends available to an evaluation.
#[derive(Clone)]
pub struct Backends {
    pub primary: Arc<dyn ModelBackend>,
    /// Required for separate-mode multi-agent runs.
    pub roles: Option<RoleBackends>,
}

impl Backends {
    pub fn single(primary: Arc<dyn ModelBackend>) -> Self {
        Self { primary, roles: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerAttempt {
    pub question_id: String,
    pub run_index: u32,
    pub initial: Prediction,
    #[serde(rename = "final")]
    pub final_answer: Prediction,
    pub verified: bool,
    /// Set when the attempt stands in for a failed backend call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Every completion made for this attempt, in issue order.
    #[serde(skip)]
    pub stage_records: Vec<TranscriptEntry>,
}

/// Parses candidate numbers from a retriever or verifier reply. Numbers are
/// any digit runs; those outside `1..=max` are dropped.
pub fn parse_selection(reply: &str, max: usize) -> BTreeSet<usize> {
    normalize_digits(reply)
        .split(|c: char| !c.is_ascii_digit())
        .filter_map(|t| t.parse::<usize>().ok())
        .filter(|n| (1..=max).contains(n))
        .collect()
}

/// Per-repeat inputs shared by every question.
pub struct Resources<'a> {
    pub demos: &'a [Question],
    pub pool: &'a [Question],
    pub roles: Option<&'a RoleBackends>,
}

/// Runs strategies for single questions.
#[derive(Debug, Clone)]
pub struct Pipeline {
    prompts: PromptBuilder,
    params: SamplingParams,
    lenient: bool,
    guarded_years: BTreeSet<Year>,
}

impl Pipeline {
    pub fn new(prompts: PromptBuilder, params: SamplingParams) -> Self {
        Self { prompts, params, lenient: false, guarded_years: BTreeSet::new() }
    }

    pub fn lenient(mut self, lenient: bool) -> Self {
        self.lenient = lenient;
        self
    }

    /// Years that must never appear in demonstrations or candidate pools.
    pub fn guard_years(mut self, years: impl IntoIterator<Item = Year>) -> Self {
        self.guarded_years.extend(years);
        self
    }

    pub fn prompts(&self) -> &PromptBuilder {
        &self.prompts
    }

    fn parse(&self, raw: &str, shape: &AnswerShape) -> Prediction {
        if self.lenient {
            parse_answer_lenient(raw, shape)
        } else {
            parse_answer(raw, shape)
        }
    }

    fn prompt_err(q: &Question) -> impl FnOnce(PromptError) -> PipelineError + '_ {
        move |source| PipelineError::Prompt { question_id: q.id.clone(), source }
    }

    fn call(
        &self,
        backend: &dyn ModelBackend,
        context: CallContext,
        messages: &MessageSequence,
    ) -> Result<TranscriptEntry, PipelineError> {
        match backend::complete(backend, &context, messages, &self.params) {
            Ok(record) => Ok(TranscriptEntry { context, record }),
            Err(source) => Err(PipelineError::Backend { question_id: context.question_id, stage: context.stage, source }),
        }
    }

    fn check_sources(&self, q: &Question, sources: &[Question], what: &str) -> Result<(), PipelineError> {
        for s in sources {
            if s.id == q.id || s.year == q.year || self.guarded_years.contains(&s.year) {
                return Err(PipelineError::Leakage(format!(
                    "{what} {} (year {}) may not be used for test question {} (year {})",
                    s.id, s.year, q.id, q.year
                )));
            }
        }
        Ok(())
    }

    fn single_pass(&self, q: &Question, messages: MessageSequence, backend: &dyn ModelBackend, run_index: u32) -> Result<AnswerAttempt, PipelineError> {
        let entry = self.call(backend, CallContext::new(run_index, &q.id, Stage::Answer), &messages)?;
        let parsed = self.parse(&entry.record.response, q.shape());
        Ok(AnswerAttempt {
            question_id: q.id.clone(),
            run_index,
            initial: parsed.clone(),
            final_answer: parsed,
            verified: false,
            error: None,
            stage_records: vec![entry],
        })
    }

    pub fn run_zero_shot(&self, q: &Question, backend: &dyn ModelBackend, run_index: u32) -> Result<AnswerAttempt, PipelineError> {
        let messages = self.prompts.build_answer_prompt(q, &[]).map_err(Self::prompt_err(q))?;
        self.single_pass(q, messages, backend, run_index)
    }

    pub fn run_few_shot(
        &self,
        q: &Question,
        demos: &[Question],
        backend: &dyn ModelBackend,
        run_index: u32,
    ) -> Result<AnswerAttempt, PipelineError> {
        self.check_sources(q, demos, "demonstration")?;
        let messages = self.prompts.build_answer_prompt(q, demos).map_err(Self::prompt_err(q))?;
        self.single_pass(q, messages, backend, run_index)
    }

    /// Runs `inner`, then one verification pass. A verifier reply that fails
    /// strict parsing leaves the initial answer in place.
    pub fn run_self_verification(
        &self,
        q: &Question,
        backend: &dyn ModelBackend,
        inner: &Strategy,
        resources: &Resources<'_>,
        run_index: u32,
    ) -> Result<AnswerAttempt, PipelineError> {
        if matches!(inner, Strategy::SelfVerify { .. }) {
            return Err(PipelineError::Config("self-verification cannot wrap another self-verification".into()));
        }
        let mut attempt = self.run_strategy(inner, q, backend, resources, run_index)?;
        let messages = match attempt.initial.answer() {
            Some(answer) => self.prompts.build_verification_prompt(q, answer),
            None => self.prompts.build_verification_prompt_raw(q, &attempt.initial.answer_text()),
        }
        .map_err(Self::prompt_err(q))?;
        let entry = self.call(backend, CallContext::new(run_index, &q.id, Stage::Verification), &messages)?;
        let verdict = self.parse(&entry.record.response, q.shape());
        attempt.stage_records.push(entry);
        if !verdict.is_violation() {
            attempt.final_answer = verdict;
        }
        attempt.verified = true;
        Ok(attempt)
    }

    /// Retriever (per batch of the pool), verifier, one extractor call per
    /// retained candidate, then the reasoner.
    pub fn run_multi_agent(
        &self,
        q: &Question,
        pool: &[Question],
        roles: &RoleBackends,
        batch_size: usize,
        run_index: u32,
    ) -> Result<AnswerAttempt, PipelineError> {
        if pool.is_empty() {
            return Err(PipelineError::EmptyPool);
        }
        if batch_size == 0 {
            return Err(PipelineError::Config("multi-agent batch size must be at least 1".into()));
        }
        self.check_sources(q, pool, "pool question")?;
        let mut records = Vec::new();

        let mut retrieved: BTreeSet<usize> = BTreeSet::new();
        for (batch_no, batch) in pool.chunks(batch_size).enumerate() {
            let offset = batch_no * batch_size;
            let candidates: Vec<Candidate> =
                batch.iter().enumerate().map(|(i, question)| Candidate { number: i + 1, question }).collect();
            let bindings = AgentBindings { question: Some(q), candidates: Some(&candidates), ..Default::default() };
            let messages = self.prompts.build_agent_prompt(AgentRole::Retriever, &bindings).map_err(Self::prompt_err(q))?;
            let context = CallContext::new(run_index, &q.id, Stage::Retriever).with_detail(format!("batch-{}", batch_no + 1));
            let entry = self.call(roles.get(AgentRole::Retriever), context, &messages)?;
            retrieved.extend(parse_selection(&entry.record.response, batch.len()).into_iter().map(|n| offset + n - 1));
            records.push(entry);
        }

        let retrieved: Vec<&Question> = retrieved.into_iter().map(|i| &pool[i]).collect();
        let mut retained: Vec<&Question> = Vec::new();
        if !retrieved.is_empty() {
            let candidates: Vec<Candidate> =
                retrieved.iter().enumerate().map(|(i, question)| Candidate { number: i + 1, question }).collect();
            let bindings = AgentBindings { question: Some(q), candidates: Some(&candidates), ..Default::default() };
            let messages = self.prompts.build_agent_prompt(AgentRole::Verifier, &bindings).map_err(Self::prompt_err(q))?;
            let entry = self.call(roles.get(AgentRole::Verifier), CallContext::new(run_index, &q.id, Stage::Verifier), &messages)?;
            retained = parse_selection(&entry.record.response, retrieved.len()).into_iter().map(|n| retrieved[n - 1]).collect();
            records.push(entry);
        }

        let mut knowledge = Vec::with_capacity(retained.len());
        for past in retained {
            let bindings = AgentBindings { question: Some(past), ..Default::default() };
            let messages = self.prompts.build_agent_prompt(AgentRole::Extractor, &bindings).map_err(Self::prompt_err(q))?;
            let context = CallContext::new(run_index, &q.id, Stage::Extractor).with_detail(past.id.clone());
            let entry = self.call(roles.get(AgentRole::Extractor), context, &messages)?;
            knowledge.push(entry.record.response.trim_end().to_string());
            records.push(entry);
        }

        let bindings = AgentBindings { question: Some(q), knowledge: Some(&knowledge), ..Default::default() };
        let messages = self.prompts.build_agent_prompt(AgentRole::Reasoner, &bindings).map_err(Self::prompt_err(q))?;
        let entry = self.call(roles.get(AgentRole::Reasoner), CallContext::new(run_index, &q.id, Stage::Reasoner), &messages)?;
        let parsed = self.parse(&entry.record.response, q.shape());
        records.push(entry);

        Ok(AnswerAttempt {
            question_id: q.id.clone(),
            run_index,
            initial: parsed.clone(),
            final_answer: parsed,
            verified: false,
            error: None,
            stage_records: records,
        })
    }

    pub fn run_strategy(
        &self,
        strategy: &Strategy,
        q: &Question,
        backend: &dyn ModelBackend,
        resources: &Resources<'_>,
        run_index: u32,
    ) -> Result<AnswerAttempt, PipelineError> {
        match strategy {
            Strategy::ZeroShot => self.run_zero_shot(q, backend, run_index),
            Strategy::FewShot { .. } => self.run_few_shot(q, resources.demos, backend, run_index),
            Strategy::SelfVerify { inner } => self.run_self_verification(q, backend, inner, resources, run_index),
            Strategy::MultiAgent { batch_size, .. } => {
                let roles = resources
                    .roles
                    .ok_or_else(|| PipelineError::Config("multi-agent strategy needs role backends".into()))?;
                self.run_multi_agent(q, resources.pool, roles, *batch_size, run_index)
            }
        }
    }
}

/// One pass over the test questions.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResult {
    pub run_index: u32,
    pub attempts: Vec<AnswerAttempt>,
    pub graded: GradedExam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRun {
    pub repeats: Vec<RepeatResult>,
    /// Some question failed and was graded as an empty answer.
    pub incomplete: bool,
}

impl EvaluationRun {
    /// Every completion, ordered by repeat, then question, then issue order.
    pub fn transcript(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.repeats.iter().flat_map(|r| r.attempts.iter().flat_map(|a| a.stage_records.iter()))
    }
}

/// Runs `config.repeats` independent passes over the active test questions.
///
/// `train` supplies few-shot demonstrations and the multi-agent candidate
/// pool; it must share no question or year with `test`.
pub fn run_evaluation(
    test: &ExamDataset,
    train: &ExamDataset,
    config: &PipelineConfig,
    backends: &Backends,
    prompts: &PromptBuilder,
) -> Result<EvaluationRun, PipelineError> {
    config.validate()?;
    let test_years: BTreeSet<Year> = test.active().map(|q| q.year).collect();
    let test_ids: HashSet<&str> = test.active().map(|q| q.id.as_str()).collect();
    if let Some(q) = train.active().find(|q| test_ids.contains(q.id.as_str()) || test_years.contains(&q.year)) {
        return Err(PipelineError::Leakage(format!(
            "training question {} (year {}) overlaps the test split",
            q.id, q.year
        )));
    }

    let demos = match config.strategy.few_shot() {
        Some((k, seed)) => select_demonstrations(train, k, seed)?,
        None => Vec::new(),
    };
    let pool: Vec<Question> = train.active().cloned().collect();
    let roles = match config.strategy.multi_agent() {
        None => None,
        Some(AgentMode::Shared) => Some(RoleBackends::shared(backends.primary.clone())),
        Some(AgentMode::Separate) => Some(backends.roles.clone().ok_or_else(|| {
            PipelineError::Config("separate multi-agent mode needs one backend per role".into())
        })?),
    };
    let resources = Resources { demos: &demos, pool: &pool, roles: roles.as_ref() };
    let questions: Vec<&Question> = test.active().collect();
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut repeats = Vec::with_capacity(config.repeats as usize);
    let mut incomplete = false;
    for run_index in 1..=config.repeats {
        let mut params = config.sampling.clone();
        if let Some(seed) = config.run_seed {
            params.seed = Some(seed.wrapping_add(u64::from(run_index)));
        }
        let pipeline = Pipeline::new(prompts.clone(), params).lenient(config.lenient).guard_years(test_years.iter().copied());
        let outcomes: Vec<Result<AnswerAttempt, PipelineError>> = threads.install(|| {
            questions
                .par_iter()
                .map(|q| pipeline.run_strategy(&config.strategy, q, backends.primary.as_ref(), &resources, run_index))
                .collect()
        });
        let mut attempts = Vec::with_capacity(outcomes.len());
        for (q, outcome) in questions.iter().zip(outcomes) {
            match outcome {
                Ok(a) => attempts.push(a),
                Err(e) if config.failure_policy == FailurePolicy::Record && matches!(e, PipelineError::Backend { .. }) => {
                    incomplete = true;
                    attempts.push(AnswerAttempt {
                        question_id: q.id.clone(),
                        run_index,
                        initial: Prediction::missing(),
                        final_answer: Prediction::missing(),
                        verified: false,
                        error: Some(e.to_string()),
                        stage_records: Vec::new(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let predictions: BTreeMap<String, Prediction> =
            attempts.iter().map(|a| (a.question_id.clone(), a.final_answer.clone())).collect();
        let graded = grade_exam(test, &predictions, &config.pass_rule)?;
        repeats.push(RepeatResult { run_index, attempts, graded });
    }
    Ok(EvaluationRun { repeats, incomplete })
}
