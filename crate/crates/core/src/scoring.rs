//! Official point-based grading.
//!
//! Single-choice questions and digit sequences shorter than three statements
//! are all-or-nothing. A digit sequence of three or more statements worth `p`
//! points earns `p` with no mistakes, `p - 2` (never below zero) with exactly
//! one wrong statement, and nothing otherwise. Format violations earn nothing.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer_format::{ParsedAnswer, Prediction};
use crate::dataset::{AnswerShape, ExamDataset, Question, Subject};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoringError {
    #[error("prediction for {question_id} does not match the question's answer shape")]
    ShapeMismatch { question_id: String },
    #[error("result refers to unknown question id {0:?}")]
    UnknownQuestion(String),
    #[error("cannot compute accuracy over zero results")]
    EmptyResults,
    #[error("answer space of {question_id} has {size} entries, above the bound {bound}")]
    AnswerSpaceTooLarge { question_id: String, size: u128, bound: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub subject: Subject,
    pub predicted: Prediction,
    pub correct_statements: u32,
    pub total_statements: u32,
    pub points_awarded: u32,
    pub points_possible: u32,
    pub exact_match: bool,
}

/// Points for a multi-statement answer with `wrong` mismatches.
pub fn partial_credit(points: u32, statements: usize, wrong: usize) -> u32 {
    match wrong {
        0 => points,
        1 if statements >= 3 => points.saturating_sub(2),
        _ => 0,
    }
}

pub fn score_question(q: &Question, predicted: &Prediction) -> Result<QuestionResult, ScoringError> {
    let total = q.shape().unit_count() as u32;
    let (correct, awarded, exact) = match predicted {
        Prediction::Violation { .. } => (0, 0, false),
        Prediction::Answer { answer } => {
            if !answer.conforms_to(q.shape()) {
                return Err(ScoringError::ShapeMismatch { question_id: q.id.clone() });
            }
            match (answer, q.key.value()) {
                (ParsedAnswer::OptionIndex { value }, ParsedAnswer::OptionIndex { value: key }) => {
                    let hit = value == key;
                    (hit as u32, if hit { q.points } else { 0 }, hit)
                }
                (ParsedAnswer::DigitString { digits }, ParsedAnswer::DigitString { digits: key }) => {
                    let wrong = digits.iter().zip(key).filter(|(a, b)| a != b).count();
                    let awarded = partial_credit(q.points, key.len(), wrong);
                    (total - wrong as u32, awarded, wrong == 0)
                }
                _ => return Err(ScoringError::ShapeMismatch { question_id: q.id.clone() }),
            }
        }
    };
    Ok(QuestionResult {
        question_id: q.id.clone(),
        subject: q.subject,
        predicted: predicted.clone(),
        correct_statements: correct,
        total_statements: total,
        points_awarded: awarded,
        points_possible: q.points,
        exact_match: exact,
    })
}

/// Pass threshold and per-subject floors for one exam year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRule {
    pub pass_threshold: u32,
    pub subject_max: BTreeMap<Subject, u32>,
    /// Minimum share of each subject's maximum, in percent.
    pub floor_percent: u32,
}

impl Default for PassRule {
    fn default() -> Self {
        Self::reiwa6()
    }
}

impl PassRule {
    /// The 2024 (Reiwa 6) rule: 93 of 175 overall, 40% in every subject.
    pub fn reiwa6() -> Self {
        Self::with_threshold(93)
    }

    pub fn with_threshold(pass_threshold: u32) -> Self {
        Self {
            pass_threshold,
            subject_max: Subject::ALL.iter().map(|s| (*s, s.official_max())).collect(),
            floor_percent: 40,
        }
    }

    /// Smallest integer score reaching `floor_percent` of the subject maximum.
    pub fn floor(&self, subject: Subject) -> u32 {
        let max = self.subject_max.get(&subject).copied().unwrap_or(0);
        (max * self.floor_percent).div_ceil(100)
    }

    pub fn floors(&self) -> BTreeMap<Subject, u32> {
        Subject::ALL.iter().map(|s| (*s, self.floor(*s))).collect()
    }

    pub fn passes(&self, per_subject: &BTreeMap<Subject, u32>) -> bool {
        let total: u32 = per_subject.values().sum();
        total >= self.pass_threshold
            && Subject::ALL
                .iter()
                .all(|s| per_subject.get(s).copied().unwrap_or(0) >= self.floor(*s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamScore {
    pub per_subject: BTreeMap<Subject, u32>,
    pub total: u32,
    pub pass: bool,
    pub pass_threshold: u32,
    pub subject_floors: BTreeMap<Subject, u32>,
}

impl ExamScore {
    pub fn from_subject_points(per_subject: BTreeMap<Subject, u32>, rule: &PassRule) -> Self {
        let mut per_subject = per_subject;
        for s in Subject::ALL {
            per_subject.entry(s).or_insert(0);
        }
        ExamScore {
            total: per_subject.values().sum(),
            pass: rule.passes(&per_subject),
            pass_threshold: rule.pass_threshold,
            subject_floors: rule.floors(),
            per_subject,
        }
    }

    pub fn from_results(results: &[QuestionResult], rule: &PassRule) -> Self {
        let mut per_subject = BTreeMap::new();
        for r in results {
            *per_subject.entry(r.subject).or_insert(0) += r.points_awarded;
        }
        Self::from_subject_points(per_subject, rule)
    }
}

/// Per-question results together with the exam score they add up to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradedExam {
    pub results: Vec<QuestionResult>,
    pub score: ExamScore,
    /// Question ids with no prediction, graded as empty output.
    pub missing: Vec<String>,
}

/// Grades every active question of `dataset`; ids absent from `predictions`
/// count as empty answers.
pub fn grade_exam(
    dataset: &ExamDataset,
    predictions: &BTreeMap<String, Prediction>,
    rule: &PassRule,
) -> Result<GradedExam, ScoringError> {
    let known: HashSet<&str> = dataset.active().map(|q| q.id.as_str()).collect();
    if let Some(unknown) = predictions.keys().find(|id| !known.contains(id.as_str())) {
        return Err(ScoringError::UnknownQuestion(unknown.clone()));
    }
    let missing_prediction = Prediction::missing();
    let mut missing = Vec::new();
    let mut results = Vec::new();
    for q in dataset.active() {
        let predicted = predictions.get(&q.id).unwrap_or_else(|| {
            missing.push(q.id.clone());
            &missing_prediction
        });
        results.push(score_question(q, predicted)?);
    }
    let score = ExamScore::from_results(&results, rule);
    Ok(GradedExam { results, score, missing })
}

pub fn score_exam(
    dataset: &ExamDataset,
    predictions: &BTreeMap<String, Prediction>,
    rule: &PassRule,
) -> Result<ExamScore, ScoringError> {
    grade_exam(dataset, predictions, rule).map(|g| g.score)
}

/// Fraction of results that match their key exactly.
pub fn exact_match_accuracy(results: &[QuestionResult]) -> Result<f64, ScoringError> {
    if results.is_empty() {
        return Err(ScoringError::EmptyResults);
    }
    let exact = results.iter().filter(|r| r.exact_match).count();
    Ok(exact as f64 / results.len() as f64)
}

/// Exhaustive answer-string → points table built by applying the grading rule
/// directly to strings. Used to cross-check [`score_question`].
pub fn brute_force_score_oracle(q: &Question, bound: u64) -> Result<BTreeMap<String, u32>, ScoringError> {
    let key = q.key.render();
    let mut table = BTreeMap::new();
    match q.shape() {
        AnswerShape::SingleChoice { option_count } => {
            if u64::from(*option_count) > bound {
                return Err(ScoringError::AnswerSpaceTooLarge {
                    question_id: q.id.clone(),
                    size: u128::from(*option_count),
                    bound,
                });
            }
            for option in 1..=*option_count {
                let text = option.to_string();
                let points = if text == key { q.points } else { 0 };
                table.insert(text, points);
            }
        }
        AnswerShape::DigitSequence { length, alphabet } => {
            let size = (alphabet.len() as u128).checked_pow(*length as u32).unwrap_or(u128::MAX);
            if size > u128::from(bound) {
                return Err(ScoringError::AnswerSpaceTooLarge { question_id: q.id.clone(), size, bound });
            }
            let symbols: Vec<char> = alphabet.iter().map(|d| char::from(b'0' + d)).collect();
            let mut odometer = vec![0usize; *length];
            loop {
                let candidate: String = odometer.iter().map(|i| symbols[*i]).collect();
                let mismatches = candidate.chars().zip(key.chars()).filter(|(a, b)| a != b).count();
                let points = if *length >= 3 {
                    match mismatches {
                        0 => q.points,
                        1 => q.points.saturating_sub(2),
                        _ => 0,
                    }
                } else if mismatches == 0 {
                    q.points
                } else {
                    0
                };
                table.insert(candidate, points);
                // Advance the odometer; stop once it wraps.
                let mut pos = *length;
                loop {
                    if pos == 0 {
                        return Ok(table);
                    }
                    pos -= 1;
                    odometer[pos] += 1;
                    if odometer[pos] < symbols.len() {
                        break;
                    }
                    odometer[pos] = 0;
                }
            }
        }
    }
    Ok(table)
}
