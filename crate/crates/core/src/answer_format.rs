//! Strict answer grammar.
//!
//! A model response is accepted only when, after full-width digit
//! normalization and trimming of surrounding whitespace, it is exactly one
//! numeric token that fits the question's [`AnswerShape`]. Everything else is a
//! [`FormatViolation`] and scores zero. Nothing is ever extracted from prose
//! unless the caller explicitly opts into [`parse_answer_lenient`].

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::AnswerShape;

/// A validated answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParsedAnswer {
    /// A single option number, 1-based.
    OptionIndex { value: u32 },
    /// One digit per statement.
    DigitString { digits: Vec<u8> },
}

impl ParsedAnswer {
    pub fn conforms_to(&self, shape: &AnswerShape) -> bool {
        match (self, shape) {
            (ParsedAnswer::OptionIndex { value }, AnswerShape::SingleChoice { option_count }) => {
                (1..=*option_count).contains(value)
            }
            (ParsedAnswer::DigitString { digits }, AnswerShape::DigitSequence { length, alphabet }) => {
                digits.len() == *length && digits.iter().all(|d| alphabet.contains(d))
            }
            _ => false,
        }
    }
}

impl fmt::Display for ParsedAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_answer(self))
    }
}

/// Why a raw response was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationReason {
    NonNumericContent,
    WrongLength,
    DigitOutsideAlphabet,
    MultipleCandidates,
    EmptyOutput,
}

impl fmt::Display for ViolationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationReason::NonNumericContent => "non-numeric content",
            ViolationReason::WrongLength => "wrong length",
            ViolationReason::DigitOutsideAlphabet => "digit outside alphabet",
            ViolationReason::MultipleCandidates => "multiple candidates",
            ViolationReason::EmptyOutput => "empty output",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FormatViolation {
    pub reason: ViolationReason,
    /// The response exactly as received.
    pub raw: String,
}

impl FormatViolation {
    pub fn new(reason: ViolationReason, raw: impl Into<String>) -> Self {
        Self { reason, raw: raw.into() }
    }

    /// The placeholder used for questions that never received a response.
    pub fn missing() -> Self {
        Self::new(ViolationReason::EmptyOutput, "")
    }
}

impl fmt::Display for FormatViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "format violation ({}): {:?}", self.reason, self.raw)
    }
}

/// Outcome of parsing one response: either a valid answer or a violation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Prediction {
    Answer { answer: ParsedAnswer },
    Violation { violation: FormatViolation },
}

impl Prediction {
    pub fn answer(&self) -> Option<&ParsedAnswer> {
        match self {
            Prediction::Answer { answer } => Some(answer),
            Prediction::Violation { .. } => None,
        }
    }

    pub fn is_violation(&self) -> bool {
        matches!(self, Prediction::Violation { .. })
    }

    pub fn missing() -> Self {
        FormatViolation::missing().into()
    }

    /// Text to place in an answer slot: the canonical rendering of a valid
    /// answer, or the raw response of a violation.
    pub fn answer_text(&self) -> Cow<'_, str> {
        match self {
            Prediction::Answer { answer } => Cow::Owned(render_answer(answer)),
            Prediction::Violation { violation } => Cow::Borrowed(&violation.raw),
        }
    }
}

impl From<ParsedAnswer> for Prediction {
    fn from(answer: ParsedAnswer) -> Self {
        Prediction::Answer { answer }
    }
}

impl From<FormatViolation> for Prediction {
    fn from(violation: FormatViolation) -> Self {
        Prediction::Violation { violation }
    }
}

impl From<Result<ParsedAnswer, FormatViolation>> for Prediction {
    fn from(result: Result<ParsedAnswer, FormatViolation>) -> Self {
        match result {
            Ok(a) => a.into(),
            Err(v) => v.into(),
        }
    }
}

/// Maps full-width digits (U+FF10..U+FF19) to ASCII.
pub fn normalize_digits(raw: &str) -> Cow<'_, str> {
    if !raw.chars().any(is_fullwidth_digit) {
        return Cow::Borrowed(raw);
    }
    Cow::Owned(
        raw.chars()
            .map(|c| {
                if is_fullwidth_digit(c) {
                    char::from(b'0' + (c as u32 - 0xFF10) as u8)
                } else {
                    c
                }
            })
            .collect(),
    )
}

fn is_fullwidth_digit(c: char) -> bool {
    ('\u{FF10}'..='\u{FF19}').contains(&c)
}

/// Parses a raw model response against `shape` under the strict grammar.
pub fn parse_answer(raw: &str, shape: &AnswerShape) -> Prediction {
    parse_strict(raw, shape).into()
}

fn parse_strict(raw: &str, shape: &AnswerShape) -> Result<ParsedAnswer, FormatViolation> {
    let violation = |reason| FormatViolation::new(reason, raw);
    let normalized = normalize_digits(raw);
    let trimmed = normalized.trim();
    if trimmed.is_empty() {
        return Err(violation(ViolationReason::EmptyOutput));
    }
    if trimmed.chars().any(|c| !c.is_ascii_digit() && !c.is_whitespace()) {
        return Err(violation(ViolationReason::NonNumericContent));
    }
    if trimmed.split_whitespace().nth(1).is_some() {
        return Err(violation(ViolationReason::MultipleCandidates));
    }
    parse_token(trimmed, shape).map_err(violation)
}

/// Validates a single all-ASCII-digit token against the shape.
fn parse_token(token: &str, shape: &AnswerShape) -> Result<ParsedAnswer, ViolationReason> {
    match shape {
        AnswerShape::SingleChoice { option_count } => {
            let width = option_count.to_string().len();
            if token == "0" {
                return Err(ViolationReason::DigitOutsideAlphabet);
            }
            if token.len() > width || token.starts_with('0') {
                return Err(ViolationReason::WrongLength);
            }
            let value: u32 = token.parse().map_err(|_| ViolationReason::WrongLength)?;
            if value < 1 || value > *option_count {
                return Err(ViolationReason::DigitOutsideAlphabet);
            }
            Ok(ParsedAnswer::OptionIndex { value })
        }
        AnswerShape::DigitSequence { length, alphabet } => {
            if token.len() != *length {
                return Err(ViolationReason::WrongLength);
            }
            let digits: Vec<u8> = token.bytes().map(|b| b - b'0').collect();
            if digits.iter().any(|d| !alphabet.contains(d)) {
                return Err(ViolationReason::DigitOutsideAlphabet);
            }
            Ok(ParsedAnswer::DigitString { digits })
        }
    }
}

/// Non-default extraction mode: when strict parsing fails, accept the
/// response if exactly one distinct digit run in it fits the shape.
///
/// Not part of the official grading behaviour; only reachable through an
/// explicit opt-in.
pub fn parse_answer_lenient(raw: &str, shape: &AnswerShape) -> Prediction {
    let strict = parse_strict(raw, shape);
    let Err(violation) = strict else {
        return strict.into();
    };
    if violation.reason == ViolationReason::EmptyOutput {
        return violation.into();
    }
    let normalized = normalize_digits(raw);
    let mut found: Option<ParsedAnswer> = None;
    for run in normalized
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
    {
        if let Ok(candidate) = parse_token(run, shape) {
            match &found {
                Some(prev) if *prev != candidate => return violation.into(),
                _ => found = Some(candidate),
            }
        }
    }
    match found {
        Some(answer) => answer.into(),
        None => violation.into(),
    }
}

/// Canonical text of an answer; `parse_answer` maps it back to the same value.
pub fn render_answer(answer: &ParsedAnswer) -> String {
    match answer {
        ParsedAnswer::OptionIndex { value } => value.to_string(),
        ParsedAnswer::DigitString { digits } => digits.iter().map(|d| char::from(b'0' + d)).collect(),
    }
}
