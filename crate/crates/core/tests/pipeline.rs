mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use exameval::answer_format::{ParsedAnswer, Prediction};
use exameval::backend::{ModelBackend, SamplingParams, ScriptedBackend};
use exameval::dataset::{ExamDataset, Subject};
use exameval::pipeline::{
    run_evaluation, AgentMode, Backends, FailurePolicy, Pipeline, PipelineConfig, PipelineError, Resources,
    RoleBackends, Strategy,
};
use exameval::prompts::{AgentRole, PromptBuilder, PromptKind};
use exameval::transcript::Stage;

use common::{question, small_split};

fn keys(ds: &ExamDataset) -> BTreeMap<String, String> {
    ds.questions.iter().map(|q| (q.id.clone(), q.key.render())).collect()
}

/// Answers every question with its key.
fn keyed(name: &str, ds: &ExamDataset) -> ScriptedBackend {
    let keys = keys(ds);
    ScriptedBackend::new(name).with(move |call| keys.get(&call.context.question_id).cloned())
}

fn run(strategy: Strategy, backend: Arc<dyn ModelBackend>, repeats: u32) -> Result<exameval::pipeline::EvaluationRun, PipelineError> {
    let (test, train) = small_split();
    let mut config = PipelineConfig::new(strategy);
    config.repeats = repeats;
    run_evaluation(&test, &train, &config, &Backends::single(backend), &PromptBuilder::default())
}

fn digits(s: &str) -> Prediction {
    ParsedAnswer::DigitString { digits: s.bytes().map(|b| b - b'0').collect() }.into()
}

#[test]
fn zero_shot_makes_one_completion_per_question() {
    let (test, _) = small_split();
    let run = run(Strategy::ZeroShot, Arc::new(keyed("m", &test)), 2).unwrap();
    assert_eq!(run.repeats.len(), 2);
    for repeat in &run.repeats {
        assert_eq!(repeat.graded.score.total, 10);
        assert!(repeat.attempts.iter().all(|a| a.stage_records.len() == 1 && !a.verified));
    }
    assert_eq!(run.transcript().count(), 6);
    let order: Vec<(u32, &str)> = run.transcript().map(|e| (e.context.run_index, e.context.question_id.as_str())).collect();
    assert_eq!(order, [(1, "T1"), (1, "T2"), (1, "T3"), (2, "T1"), (2, "T2"), (2, "T3")]);
}

#[test]
fn few_shot_rejects_demonstrations_from_the_test_year() {
    let (test, _) = small_split();
    let pipeline = Pipeline::new(PromptBuilder::default(), SamplingParams::default());
    let backend = keyed("m", &test);
    let leaked = question("X1", "R6", Subject::Civil, "12", 2);
    let err = pipeline.run_few_shot(&test.questions[0], &[leaked], &backend, 1).unwrap_err();
    assert!(matches!(err, PipelineError::Leakage(_)), "{err}");

    let guarded = Pipeline::new(PromptBuilder::default(), SamplingParams::default()).guard_years(["R4".parse().unwrap()]);
    let other_test_year = question("X2", "R4", Subject::Civil, "12", 2);
    assert!(matches!(
        guarded.run_few_shot(&test.questions[0], &[other_test_year], &backend, 1),
        Err(PipelineError::Leakage(_))
    ));
    assert!(backend.calls().is_empty());
}

#[test]
fn few_shot_prompt_contains_selected_demonstrations() {
    let (test, _) = small_split();
    let backend = Arc::new(keyed("m", &test));
    let run = run(Strategy::FewShot { k: 2, seed: 7 }, backend, 1).unwrap();
    for entry in run.transcript() {
        let text = entry.record.messages.full_text();
        let demos = ["P1", "P2", "P3", "P4"].iter().filter(|id| text.contains(&format!("{id} 正しいもの"))).count();
        assert_eq!(demos, 2);
    }
}

#[test]
fn train_test_overlap_is_rejected() {
    let (test, mut train) = small_split();
    train.questions.push(question("P9", "R6", Subject::Civil, "12", 2));
    let config = PipelineConfig::new(Strategy::ZeroShot);
    let backend: Arc<dyn ModelBackend> = Arc::new(keyed("m", &test));
    let err = run_evaluation(&test, &train, &config, &Backends::single(backend), &PromptBuilder::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Leakage(_)));
}

#[test]
fn self_verification_repairs_and_counts_two_completions() {
    let backend = ScriptedBackend::new("m")
        .respond(Stage::Answer, Some("T1"), "112")
        .respond(Stage::Verification, Some("T1"), "122")
        .respond(Stage::Answer, None, "11111")
        .respond(Stage::Verification, None, "申し訳ありませんが判断できません");
    let backend = Arc::new(backend);
    let run = run(Strategy::SelfVerify { inner: Box::new(Strategy::ZeroShot) }, backend.clone(), 1).unwrap();
    let attempts = &run.repeats[0].attempts;
    assert!(attempts.iter().all(|a| a.stage_records.len() == 2 && a.verified));
    assert_eq!(attempts[0].initial, digits("112"));
    assert_eq!(attempts[0].final_answer, digits("122"));
    // T2 key 21121, answer 11111: two wrong, 0 points. The verifier reply is
    // not a valid answer, so the initial answer stands.
    assert_eq!(attempts[1].final_answer, digits("11111"));
    assert_eq!(attempts[2].initial, attempts[2].final_answer);
    let results = &run.repeats[0].graded.results;
    assert_eq!(results[0].points_awarded, 3);
    assert_eq!(backend.calls().len(), 6);
}

#[test]
fn self_verification_shows_raw_text_of_invalid_initial_answer() {
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = seen.clone();
    let backend = ScriptedBackend::new("m").respond(Stage::Answer, None, "OOX").with(move |call| {
        (call.context.stage == Stage::Verification).then(|| {
            log.lock().unwrap().push(call.answer_slot().unwrap_or_default());
            "122".to_string()
        })
    });
    let run = run(Strategy::SelfVerify { inner: Box::new(Strategy::ZeroShot) }, Arc::new(backend), 1).unwrap();
    assert_eq!(seen.lock().unwrap().as_slice(), ["OOX", "OOX", "OOX"]);
    let first = &run.repeats[0].attempts[0];
    assert!(first.initial.is_violation());
    assert_eq!(first.final_answer, digits("122"));
}

#[test]
fn self_verification_cannot_nest() {
    let (test, _) = small_split();
    let nested = Strategy::SelfVerify { inner: Box::new(Strategy::SelfVerify { inner: Box::new(Strategy::ZeroShot) }) };
    assert!(matches!(run(nested.clone(), Arc::new(keyed("m", &test)), 1), Err(PipelineError::Config(_))));
    let pipeline = Pipeline::new(PromptBuilder::default(), SamplingParams::default());
    let resources = Resources { demos: &[], pool: &[], roles: None };
    let Strategy::SelfVerify { inner } = nested else { unreachable!() };
    assert!(pipeline.run_self_verification(&test.questions[0], &keyed("m", &test), &inner, &resources, 1).is_err());
}

fn agent_backend(retriever: &'static str, verifier: &'static str, test: &ExamDataset) -> ScriptedBackend {
    let keys = keys(test);
    ScriptedBackend::new("agents")
        .respond(Stage::Retriever, None, retriever)
        .respond(Stage::Verifier, None, verifier)
        .with(|call| (call.context.stage == Stage::Extractor).then(|| "・関連する知識".to_string()))
        .with(move |call| (call.context.stage == Stage::Reasoner).then(|| keys[&call.context.question_id].clone()))
}

#[test]
fn multi_agent_stage_order_and_completion_count() {
    let (test, _) = small_split();
    let backend = agent_backend("1, 3, 4", "1と3", &test);
    let strategy = Strategy::MultiAgent { mode: AgentMode::Shared, batch_size: 20 };
    let run = run(strategy, Arc::new(backend), 1).unwrap();
    for attempt in &run.repeats[0].attempts {
        let stages: Vec<Stage> = attempt.stage_records.iter().map(|e| e.context.stage).collect();
        assert_eq!(stages, [Stage::Retriever, Stage::Verifier, Stage::Extractor, Stage::Extractor, Stage::Reasoner]);
        assert_eq!(attempt.stage_records.len(), 3 + 2);
        // Retained candidates are retrieved numbers 1 and 3, i.e. P1 and P4.
        let extracted: Vec<&str> =
            attempt.stage_records.iter().filter_map(|e| e.context.detail.as_deref()).collect();
        assert_eq!(extracted, ["batch-1", "P1", "P4"]);
        let reasoner = &attempt.stage_records[4].record.messages.full_text();
        assert_eq!(reasoner.matches("・関連する知識").count(), 2);
    }
    assert_eq!(run.repeats[0].graded.score.total, 10);
}

#[test]
fn multi_agent_batches_the_pool() {
    let (test, _) = small_split();
    let backend = agent_backend("2", "1 2", &test);
    let strategy = Strategy::MultiAgent { mode: AgentMode::Shared, batch_size: 3 };
    let run = run(strategy, Arc::new(backend), 1).unwrap();
    let attempt = &run.repeats[0].attempts[0];
    let details: Vec<Option<&str>> = attempt.stage_records.iter().map(|e| e.context.detail.as_deref()).collect();
    // Pool P1..P4 in batches [P1 P2 P3] [P4]; "2" selects P2 from the first
    // batch only.
    assert_eq!(details, [Some("batch-1"), Some("batch-2"), None, Some("P2"), None]);
}

#[test]
fn multi_agent_empty_retention_still_answers() {
    let (test, _) = small_split();
    let strategy = Strategy::MultiAgent { mode: AgentMode::Shared, batch_size: 20 };

    let nothing_retrieved = agent_backend("該当なし", "1", &test);
    let run_a = run(strategy.clone(), Arc::new(nothing_retrieved), 1).unwrap();
    for a in &run_a.repeats[0].attempts {
        let stages: Vec<Stage> = a.stage_records.iter().map(|e| e.context.stage).collect();
        assert_eq!(stages, [Stage::Retriever, Stage::Reasoner]);
    }

    let nothing_retained = agent_backend("1", "", &test);
    let run_b = run(strategy, Arc::new(nothing_retained), 1).unwrap();
    for a in &run_b.repeats[0].attempts {
        assert_eq!(a.stage_records.len(), 3);
        let reasoner = a.stage_records.last().unwrap();
        assert_eq!(reasoner.context.stage, Stage::Reasoner);
        assert!(!reasoner.record.messages.full_text().contains("関連する知識"));
    }
    assert_eq!(run_b.repeats[0].graded.score.total, 10);
}

#[test]
fn separate_mode_routes_each_role_to_its_backend() {
    let (test, train) = small_split();
    let keys = keys(&test);
    let retriever = Arc::new(ScriptedBackend::new("r").respond(Stage::Retriever, None, "1"));
    let verifier = Arc::new(ScriptedBackend::new("v").respond(Stage::Verifier, None, "1"));
    let extractor = Arc::new(ScriptedBackend::new("e").respond(Stage::Extractor, None, "知識"));
    let reasoner =
        Arc::new(ScriptedBackend::new("a").with(move |call| keys.get(&call.context.question_id).cloned()));
    let roles = RoleBackends {
        retriever: retriever.clone(),
        verifier: verifier.clone(),
        extractor: extractor.clone(),
        reasoner: reasoner.clone(),
    };
    let mut config = PipelineConfig::new(Strategy::MultiAgent { mode: AgentMode::Separate, batch_size: 20 });
    config.repeats = 1;
    let primary: Arc<dyn ModelBackend> = Arc::new(ScriptedBackend::new("unused"));
    let backends = Backends { primary: primary.clone(), roles: Some(roles) };
    let run = run_evaluation(&test, &train, &config, &backends, &PromptBuilder::default()).unwrap();
    assert_eq!(run.repeats[0].graded.score.total, 10);
    for (backend, stage) in [(&retriever, Stage::Retriever), (&verifier, Stage::Verifier), (&extractor, Stage::Extractor), (&reasoner, Stage::Reasoner)] {
        let calls = backend.calls();
        assert_eq!(calls.len(), 3);
        assert!(calls.iter().all(|c| c.stage == stage));
    }

    let missing = Backends::single(primary);
    assert!(matches!(
        run_evaluation(&test, &train, &config, &missing, &PromptBuilder::default()),
        Err(PipelineError::Config(_))
    ));
}

#[test]
fn scripted_calls_see_prompt_kinds() {
    let (test, _) = small_split();
    let kinds = Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = kinds.clone();
    let keys = keys(&test);
    let backend = ScriptedBackend::new("agents").with(move |call| {
        log.lock().unwrap().push(call.kind());
        Some(match call.context.stage {
            Stage::Retriever | Stage::Verifier => "1".to_string(),
            Stage::Extractor => "知識".to_string(),
            _ => keys[&call.context.question_id].clone(),
        })
    });
    let strategy = Strategy::MultiAgent { mode: AgentMode::Shared, batch_size: 20 };
    run(strategy, Arc::new(backend), 1).unwrap();
    let kinds = kinds.lock().unwrap();
    let expected: Vec<Option<PromptKind>> = [AgentRole::Retriever, AgentRole::Verifier, AgentRole::Extractor, AgentRole::Reasoner]
        .into_iter()
        .map(|r| Some(PromptKind::Agent(r)))
        .collect();
    assert_eq!(kinds.len(), 12);
    assert!(kinds.chunks(4).all(|c| c == expected.as_slice()));
}

#[test]
fn failed_questions_are_recorded_or_abort() {
    let backend: Arc<dyn ModelBackend> = Arc::new(
        ScriptedBackend::new("m").respond(Stage::Answer, Some("T1"), "122").respond(Stage::Answer, Some("T3"), "211"),
    );
    let (test, train) = small_split();
    let mut config = PipelineConfig::new(Strategy::ZeroShot);
    config.repeats = 1;
    let backends = Backends::single(backend);
    let run = run_evaluation(&test, &train, &config, &backends, &PromptBuilder::default()).unwrap();
    assert!(run.incomplete);
    let t2 = &run.repeats[0].attempts[1];
    assert!(t2.error.as_deref().unwrap().contains("T2"));
    assert!(t2.final_answer.is_violation());
    assert_eq!(run.repeats[0].graded.score.total, 6);

    config.failure_policy = FailurePolicy::Abort;
    let err = run_evaluation(&test, &train, &config, &backends, &PromptBuilder::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Backend { stage: Stage::Answer, .. }), "{err}");
}

#[test]
fn transcript_order_does_not_depend_on_parallelism() {
    let (test, train) = small_split();
    let strategy = Strategy::SelfVerify { inner: Box::new(Strategy::MultiAgent { mode: AgentMode::Shared, batch_size: 2 }) };
    let mut transcripts = Vec::new();
    for parallelism in [1, 8] {
        let keys = keys(&test);
        let backend = agent_backend("1 2", "2", &test)
            .with(move |call| (call.context.stage == Stage::Verification).then(|| keys[&call.context.question_id].clone()));
        let mut config = PipelineConfig::new(strategy.clone());
        config.parallelism = parallelism;
        let backends = Backends::single(Arc::new(backend));
        let run = run_evaluation(&test, &train, &config, &backends, &PromptBuilder::default()).unwrap();
        transcripts.push(run.transcript().cloned().collect::<Vec<_>>());
    }
    assert_eq!(transcripts[0], transcripts[1]);
}

#[test]
fn run_seed_varies_sampling_seed_per_repeat() {
    let (test, train) = small_split();
    let mut config = PipelineConfig::new(Strategy::ZeroShot);
    config.run_seed = Some(100);
    let backends = Backends::single(Arc::new(keyed("m", &test)));
    let run = run_evaluation(&test, &train, &config, &backends, &PromptBuilder::default()).unwrap();
    let seeds: Vec<Option<u64>> = run.repeats.iter().map(|r| r.attempts[0].stage_records[0].record.params.seed).collect();
    assert_eq!(seeds, [Some(101), Some(102), Some(103)]);
}
