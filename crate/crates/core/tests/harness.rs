mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use exameval::backend::BackendSpec;
use exameval::dataset::{load_dataset, Year};
use exameval::harness::{
    execute_run, load_answers, read_snapshot, replay_run_dir, score_answers, write_run_dir, HarnessError, RunConfig,
};
use exameval::pipeline::{PipelineConfig, Strategy};
use exameval::prompts::PromptOptions;
use exameval::scoring::PassRule;

use common::sample_path;

fn config(strategy: Strategy, repeats: u32) -> RunConfig {
    let mut pipeline = PipelineConfig::new(strategy);
    pipeline.repeats = repeats;
    RunConfig {
        label: Some("oracle".into()),
        dataset: sample_path(),
        test_years: BTreeSet::from(["R6".parse::<Year>().unwrap()]),
        backend: BackendSpec::Oracle,
        role_backends: None,
        templates: None,
        prompt: PromptOptions::default(),
        pipeline,
    }
}

fn record(dir: &Path, config: &RunConfig) {
    let outcome = execute_run(config).unwrap();
    write_run_dir(dir, &outcome).unwrap();
}

#[test]
fn run_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Strategy::FewShot { k: 2, seed: 1 }, 2);
    record(dir.path(), &cfg);
    let names: BTreeSet<String> =
        fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    for expected in [
        "config.json",
        "transcript.jsonl",
        "attempts.jsonl",
        "scores.jsonl",
        "answers-r1.tsv",
        "answers-r2.tsv",
        "summary.json",
        "summary.txt",
        "summary.md",
    ] {
        assert!(names.contains(expected), "missing {expected}");
    }
    let snapshot = read_snapshot(dir.path()).unwrap();
    assert_eq!(snapshot.config, cfg);
    assert_eq!(snapshot.fingerprint.len(), 16);

    let replay = replay_run_dir(dir.path(), None).unwrap();
    assert!(replay.identical());
    assert_eq!(replay.outcome.snapshot.fingerprint, snapshot.fingerprint);
}

#[test]
fn answers_files_rescore_to_the_recorded_totals() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = execute_run(&config(Strategy::ZeroShot, 1)).unwrap();
    write_run_dir(dir.path(), &outcome).unwrap();
    let ds = load_dataset(sample_path()).unwrap().for_year("R6".parse().unwrap());
    let answers = load_answers(&dir.path().join("answers-r1.tsv")).unwrap();
    let graded = score_answers(&ds, &answers, &PassRule::default(), false).unwrap();
    assert_eq!(graded, outcome.run.repeats[0].graded);
}

#[test]
fn edited_transcript_response_changes_the_replayed_summary() {
    let dir = tempfile::tempdir().unwrap();
    record(dir.path(), &config(Strategy::ZeroShot, 1));
    let path = dir.path().join("transcript.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    lines[0]["response"] = "説明文".into();
    let edited: String = lines.iter().map(|v| v.to_string() + "\n").collect();
    fs::write(&path, edited).unwrap();
    let replay = replay_run_dir(dir.path(), None).unwrap();
    assert!(!replay.identical());
}

#[test]
fn edited_transcript_request_is_a_replay_miss() {
    let dir = tempfile::tempdir().unwrap();
    record(dir.path(), &config(Strategy::ZeroShot, 1));
    let path = dir.path().join("transcript.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    lines[0]["digest"] = "0".repeat(64).into();
    fs::write(&path, lines.iter().map(|v| v.to_string() + "\n").collect::<String>()).unwrap();
    let err = replay_run_dir(dir.path(), None).unwrap_err();
    assert!(err.to_string().contains("R6-01"), "{err}");
}

#[test]
fn replay_refuses_a_changed_dataset() {
    let dir = tempfile::tempdir().unwrap();
    record(dir.path(), &config(Strategy::ZeroShot, 1));
    let copy = dir.path().join("edited.jsonl");
    let text = fs::read_to_string(sample_path()).unwrap();
    fs::write(&copy, text.replacen("\"points\": 4", "\"points\": 3", 1)).unwrap();
    let err = replay_run_dir(dir.path(), Some(&copy)).unwrap_err();
    assert!(matches!(err, HarnessError::DatasetChanged { .. }), "{err}");
}

#[test]
fn fingerprint_tracks_configuration() {
    let a = execute_run(&config(Strategy::ZeroShot, 1)).unwrap();
    let b = execute_run(&config(Strategy::ZeroShot, 1)).unwrap();
    let c = execute_run(&config(Strategy::FewShot { k: 1, seed: 0 }, 1)).unwrap();
    assert_eq!(a.snapshot.fingerprint, b.snapshot.fingerprint);
    assert_ne!(a.snapshot.fingerprint, c.snapshot.fingerprint);
}

#[test]
fn missing_test_year_is_an_error() {
    let mut cfg = config(Strategy::ZeroShot, 1);
    cfg.test_years = BTreeSet::from(["H20".parse::<Year>().unwrap()]);
    assert!(matches!(execute_run(&cfg), Err(HarnessError::NoTestQuestions(_))));
}
