#![allow(dead_code)]

use std::path::PathBuf;

use exameval::dataset::{AnswerShape, ExamDataset, Question, QuestionRecord, Statement, Subject};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn sample_path() -> PathBuf {
    data_dir().join("sample/exam.jsonl")
}

pub fn graded_outputs_path() -> PathBuf {
    data_dir().join("sample/graded_outputs.jsonl")
}

const LABELS: [&str; 6] = ["ア", "イ", "ウ", "エ", "オ", "カ"];

/// Digit-sequence question with one statement per key digit.
pub fn question(id: &str, year: &str, subject: Subject, key: &str, points: u32) -> Question {
    let statements = (0..key.len())
        .map(|i| Statement { label: LABELS[i].to_string(), text: format!("{id} の記述{}", LABELS[i]) })
        .collect();
    QuestionRecord {
        id: id.to_string(),
        year: year.parse().unwrap(),
        subject,
        preamble: format!("{id} 正しいものには1を、誤っているものには2を選びなさい。"),
        statements,
        options: Vec::new(),
        answer_shape: AnswerShape::digit_sequence(key.len()),
        answer_key: key.to_string(),
        points,
        excluded: false,
    }
    .try_into()
    .unwrap()
}

/// Three R6 test questions and four R5 training questions.
pub fn small_split() -> (ExamDataset, ExamDataset) {
    let test = ExamDataset::new(vec![
        question("T1", "R6", Subject::Constitutional, "122", 3),
        question("T2", "R6", Subject::Civil, "21121", 4),
        question("T3", "R6", Subject::Criminal, "211", 3),
    ]);
    let train = ExamDataset::new(vec![
        question("P1", "R5", Subject::Constitutional, "112", 3),
        question("P2", "R5", Subject::Civil, "221", 3),
        question("P3", "R5", Subject::Civil, "2211", 3),
        question("P4", "R5", Subject::Criminal, "12", 2),
    ]);
    (test, train)
}
