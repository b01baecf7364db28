//! Format-faithful exam schema and the line-delimited dataset file.
//!
//! Each line of a dataset file is one JSON object describing one intact exam
//! question. An optional first line of the form `{"meta": {"source": ...}}`
//! carries dataset metadata. Blank lines are ignored.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer_format::{parse_answer, render_answer, ParsedAnswer, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Constitutional,
    Civil,
    Criminal,
}

impl Subject {
    pub const ALL: [Subject; 3] = [Subject::Constitutional, Subject::Civil, Subject::Criminal];

    /// Points available for the subject in one official exam year.
    pub fn official_max(self) -> u32 {
        match self {
            Subject::Constitutional => 50,
            Subject::Civil => 75,
            Subject::Criminal => 50,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subject::Constitutional => "constitutional",
            Subject::Civil => "civil",
            Subject::Criminal => "criminal",
        }
    }

    /// Column heading used in report tables.
    pub fn column_label(self) -> &'static str {
        match self {
            Subject::Constitutional => "Const.",
            Subject::Civil => "Civ.",
            Subject::Criminal => "Crim.",
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subject {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "constitutional" | "const" | "憲法" => Ok(Subject::Constitutional),
            "civil" | "civ" | "民法" => Ok(Subject::Civil),
            "criminal" | "crim" | "刑法" => Ok(Subject::Criminal),
            other => Err(format!("unknown subject {other:?}")),
        }
    }
}

/// An exam year, stored as the Gregorian year.
///
/// Parses `"2024"`, `"R6"` (Reiwa era) and `"H30"` (Heisei era).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "YearRepr", into = "u16")]
pub struct Year(u16);

impl Year {
    pub fn new(gregorian: u16) -> Self {
        Year(gregorian)
    }

    pub fn gregorian(self) -> u16 {
        self.0
    }

    /// Reiwa-era tag such as `R6`, when the year falls in that era.
    pub fn reiwa_tag(self) -> Option<String> {
        (self.0 >= 2019).then(|| format!("R{}", self.0 - 2018))
    }
}

impl fmt::Display for Year {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Year {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("unparseable exam year {s:?}");
        let era = |offset: u16, digits: &str| -> Result<Year, String> {
            let n: u16 = digits.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            Ok(Year(offset + n))
        };
        if let Some(rest) = s.strip_prefix(['R', 'r']) {
            era(2018, rest)
        } else if let Some(rest) = s.strip_prefix(['H', 'h']) {
            era(1988, rest)
        } else {
            let y: u16 = s.parse().map_err(|_| bad())?;
            if !(1900..=2999).contains(&y) {
                return Err(bad());
            }
            Ok(Year(y))
        }
    }
}

impl From<Year> for u16 {
    fn from(y: Year) -> u16 {
        y.0
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum YearRepr {
    Number(u16),
    Text(String),
}

impl TryFrom<YearRepr> for Year {
    type Error = String;

    fn try_from(value: YearRepr) -> Result<Self, Self::Error> {
        match value {
            YearRepr::Number(n) => n.to_string().parse(),
            YearRepr::Text(s) => s.parse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub label: String,
    pub text: String,
}

fn default_alphabet() -> BTreeSet<u8> {
    BTreeSet::from([1, 2])
}

/// The grammar of valid answers for one question.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnswerShape {
    SingleChoice {
        option_count: u32,
    },
    DigitSequence {
        length: usize,
        #[serde(default = "default_alphabet")]
        alphabet: BTreeSet<u8>,
    },
}

impl AnswerShape {
    /// A digit sequence over the default `{1, 2}` alphabet.
    pub fn digit_sequence(length: usize) -> Self {
        AnswerShape::DigitSequence { length, alphabet: default_alphabet() }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            AnswerShape::SingleChoice { option_count } if *option_count < 2 => {
                Err(format!("option_count must be at least 2, got {option_count}"))
            }
            AnswerShape::DigitSequence { length, .. } if *length == 0 => {
                Err("digit sequence length must be at least 1".into())
            }
            AnswerShape::DigitSequence { alphabet, .. } if alphabet.is_empty() => {
                Err("digit alphabet must not be empty".into())
            }
            AnswerShape::DigitSequence { alphabet, .. } if alphabet.iter().any(|d| !(1..=9).contains(d)) => {
                Err("alphabet digits must lie in 1..=9".into())
            }
            _ => Ok(()),
        }
    }

    /// Number of independently judged units: statements for digit sequences,
    /// one for single-choice questions.
    pub fn unit_count(&self) -> usize {
        match self {
            AnswerShape::SingleChoice { .. } => 1,
            AnswerShape::DigitSequence { length, .. } => *length,
        }
    }
}

/// A shape together with a key value that has been checked against it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerKey {
    shape: AnswerShape,
    value: ParsedAnswer,
}

impl AnswerKey {
    pub fn new(shape: AnswerShape, value: ParsedAnswer) -> Result<Self, String> {
        shape.validate()?;
        if !value.conforms_to(&shape) {
            return Err(format!("key {} does not conform to {:?}", render_answer(&value), shape));
        }
        Ok(Self { shape, value })
    }

    /// Parses a key written in canonical answer syntax.
    pub fn parse(shape: AnswerShape, text: &str) -> Result<Self, String> {
        shape.validate()?;
        match parse_answer(text, &shape) {
            Prediction::Answer { answer } => Ok(Self { shape, value: answer }),
            Prediction::Violation { violation } => Err(format!(
                "answer_key {text:?} does not fit the answer shape ({})",
                violation.reason
            )),
        }
    }

    pub fn shape(&self) -> &AnswerShape {
        &self.shape
    }

    pub fn value(&self) -> &ParsedAnswer {
        &self.value
    }

    pub fn render(&self) -> String {
        render_answer(&self.value)
    }
}

/// One intact exam question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub year: Year,
    pub subject: Subject,
    pub preamble: String,
    pub statements: Vec<Statement>,
    pub options: Vec<String>,
    pub key: AnswerKey,
    pub points: u32,
    /// Kept in the file but skipped by splits, scoring and validation sums.
    pub excluded: bool,
}

impl Question {
    pub fn shape(&self) -> &AnswerShape {
        self.key.shape()
    }

    fn check(&self) -> Result<(), (&'static str, String)> {
        if self.id.trim().is_empty() {
            return Err(("id", "id must not be empty".into()));
        }
        if self.points < 1 {
            return Err(("points", "points must be at least 1".into()));
        }
        let mut labels = HashSet::new();
        for s in &self.statements {
            if s.text.trim().is_empty() {
                return Err(("statements", format!("statement {:?} has empty text", s.label)));
            }
            if !labels.insert(s.label.as_str()) {
                return Err(("statements", format!("duplicate statement label {:?}", s.label)));
            }
        }
        match self.shape() {
            AnswerShape::DigitSequence { length, .. }
                if !self.statements.is_empty() && *length != self.statements.len() =>
            {
                Err((
                    "answer_shape",
                    format!("length {length} differs from statement count {}", self.statements.len()),
                ))
            }
            AnswerShape::SingleChoice { option_count }
                if !self.options.is_empty() && *option_count as usize != self.options.len() =>
            {
                Err((
                    "answer_shape",
                    format!("option_count {option_count} differs from {} listed options", self.options.len()),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// On-disk form of a question.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: String,
    pub year: Year,
    pub subject: Subject,
    #[serde(default)]
    pub preamble: String,
    #[serde(default)]
    pub statements: Vec<Statement>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub answer_shape: AnswerShape,
    pub answer_key: String,
    pub points: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub excluded: bool,
}

impl From<&Question> for QuestionRecord {
    fn from(q: &Question) -> Self {
        QuestionRecord {
            id: q.id.clone(),
            year: q.year,
            subject: q.subject,
            preamble: q.preamble.clone(),
            statements: q.statements.clone(),
            options: q.options.clone(),
            answer_shape: q.shape().clone(),
            answer_key: q.key.render(),
            points: q.points,
            excluded: q.excluded,
        }
    }
}

impl TryFrom<QuestionRecord> for Question {
    type Error = (&'static str, String);

    fn try_from(r: QuestionRecord) -> Result<Self, Self::Error> {
        let key = AnswerKey::parse(r.answer_shape, &r.answer_key).map_err(|e| ("answer_key", e))?;
        let q = Question {
            id: r.id,
            year: r.year,
            subject: r.subject,
            preamble: r.preamble,
            statements: r.statements,
            options: r.options,
            key,
            points: r.points,
            excluded: r.excluded,
        };
        q.check()?;
        Ok(q)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub source: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: record {id:?}: {message}")]
    InvalidRecord {
        line: usize,
        id: String,
        message: String,
    },
    #[error("line {line}: duplicate question id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("test year set must not be empty")]
    EmptyTestYears,
    #[error("requested {k} demonstrations but only {available} training questions are available")]
    NotEnoughDemonstrations { k: usize, available: usize },
}

/// An immutable collection of questions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExamDataset {
    pub questions: Vec<Question>,
    pub metadata: DatasetMetadata,
}

#[derive(Deserialize)]
struct MetaLine {
    meta: DatasetMetadata,
}

/// Loads a dataset file, enforcing every schema invariant.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<ExamDataset, DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io { path: path.display().to_string(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut dataset = read_dataset(BufReader::new(file))?;
    if dataset.metadata.source.is_empty() {
        dataset.metadata.source = path.display().to_string();
    }
    Ok(dataset)
}

pub fn read_dataset(reader: impl BufRead) -> Result<ExamDataset, DatasetError> {
    let mut dataset = ExamDataset::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io { path: format!("line {line_no}"), source })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| DatasetError::Malformed {
            line: line_no,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        if value.get("meta").is_some() {
            let meta: MetaLine = serde_json::from_value(value).map_err(|e| DatasetError::Malformed {
                line: line_no,
                field: "meta".into(),
                message: e.to_string(),
            })?;
            dataset.metadata = meta.meta;
            continue;
        }
        let id = value.get("id").and_then(|v| v.as_str()).unwrap_or("").to_string();
        let record = parse_record(value, line_no)?;
        let question = Question::try_from(record).map_err(|(field, message)| {
            if id.is_empty() {
                DatasetError::Malformed { line: line_no, field: field.into(), message }
            } else {
                DatasetError::InvalidRecord { line: line_no, id: id.clone(), message: format!("{field}: {message}") }
            }
        })?;
        if !seen.insert(question.id.clone()) {
            return Err(DatasetError::DuplicateId { line: line_no, id: question.id });
        }
        dataset.questions.push(question);
    }
    Ok(dataset)
}

fn parse_record(value: serde_json::Value, line: usize) -> Result<QuestionRecord, DatasetError> {
    const REQUIRED: [&str; 6] = ["id", "year", "subject", "answer_shape", "answer_key", "points"];
    if let Some(obj) = value.as_object() {
        if let Some(missing) = REQUIRED.iter().find(|f| !obj.contains_key(**f)) {
            return Err(DatasetError::Malformed {
                line,
                field: missing.to_string(),
                message: "missing required field".into(),
            });
        }
        // Report the first field that fails to deserialize on its own.
        for (field, v) in obj {
            let check = match field.as_str() {
                "year" => serde_json::from_value::<Year>(v.clone()).err(),
                "subject" => serde_json::from_value::<Subject>(v.clone()).err(),
                "answer_shape" => serde_json::from_value::<AnswerShape>(v.clone()).err(),
                "statements" => serde_json::from_value::<Vec<Statement>>(v.clone()).err(),
                "points" => serde_json::from_value::<u32>(v.clone()).err(),
                _ => None,
            };
            if let Some(e) = check {
                return Err(DatasetError::Malformed { line, field: field.clone(), message: e.to_string() });
            }
        }
    }
    serde_json::from_value(value).map_err(|e| DatasetError::Malformed {
        line,
        field: "<record>".into(),
        message: e.to_string(),
    })
}

pub fn write_dataset(dataset: &ExamDataset, mut writer: impl Write) -> std::io::Result<()> {
    if !dataset.metadata.source.is_empty() {
        let meta = serde_json::json!({ "meta": dataset.metadata });
        writeln!(writer, "{meta}")?;
    }
    for q in &dataset.questions {
        let line = serde_json::to_string(&QuestionRecord::from(q)).map_err(std::io::Error::other)?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &ExamDataset, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut file)?;
    file.flush()
}

impl ExamDataset {
    pub fn new(questions: Vec<Question>) -> Self {
        Self { questions, metadata: DatasetMetadata::default() }
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Questions not marked as excluded, in file order.
    pub fn active(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(|q| !q.excluded)
    }

    pub fn years(&self) -> BTreeSet<Year> {
        self.questions.iter().map(|q| q.year).collect()
    }

    /// Subset of the questions belonging to `year`.
    pub fn for_year(&self, year: Year) -> ExamDataset {
        ExamDataset {
            questions: self.questions.iter().filter(|q| q.year == year).cloned().collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// SHA-256 of the serialized dataset.
    pub fn content_digest(&self) -> String {
        let mut buf = Vec::new();
        write_dataset(self, &mut buf).expect("writing to a Vec cannot fail");
        crate::digest::sha256_hex(&buf)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectFinding {
    pub subject: Subject,
    pub expected: u32,
    pub actual: u32,
}

/// Per-subject point sums of one exam year compared against the official totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub year: Year,
    pub question_count: usize,
    pub sums: BTreeMap<Subject, u32>,
    pub total: u32,
    pub flags: Vec<SubjectFinding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("year {} ({} questions)\n", self.year, self.question_count);
        for subject in Subject::ALL {
            let actual = self.sums.get(&subject).copied().unwrap_or(0);
            let mark = if self.flags.iter().any(|f| f.subject == subject) { "FLAG" } else { "ok" };
            out.push_str(&format!(
                "  {:<15} {:>3} / {:<3} {}\n",
                subject.as_str(),
                actual,
                subject.official_max(),
                mark
            ));
        }
        out.push_str(&format!("  {:<15} {:>3} / 175\n", "total", self.total));
        out
    }
}

/// Checks that the active questions of `year` add up to the official 50/75/50.
pub fn validate_exam_year(dataset: &ExamDataset, year: Year) -> ValidationReport {
    let mut sums: BTreeMap<Subject, u32> = Subject::ALL.iter().map(|s| (*s, 0)).collect();
    let mut count = 0;
    for q in dataset.active().filter(|q| q.year == year) {
        *sums.entry(q.subject).or_default() += q.points;
        count += 1;
    }
    let flags = Subject::ALL
        .iter()
        .filter(|s| sums[*s] != s.official_max())
        .map(|s| SubjectFinding { subject: *s, expected: s.official_max(), actual: sums[s] })
        .collect();
    ValidationReport { year, question_count: count, total: sums.values().sum(), sums, flags }
}

/// Result of partitioning a dataset by year.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: ExamDataset,
    pub test: ExamDataset,
    /// Requested test years with no questions in the dataset.
    pub missing_years: Vec<Year>,
}

/// Partitions the active questions into train and test by year.
pub fn split_by_year(dataset: &ExamDataset, test_years: &BTreeSet<Year>) -> Result<Split, DatasetError> {
    if test_years.is_empty() {
        return Err(DatasetError::EmptyTestYears);
    }
    let present = dataset.years();
    let (test, train): (Vec<_>, Vec<_>) = dataset.active().cloned().partition(|q| test_years.contains(&q.year));
    let part = |questions| ExamDataset { questions, metadata: dataset.metadata.clone() };
    Ok(Split {
        train: part(train),
        test: part(test),
        missing_years: test_years.iter().filter(|y| !present.contains(y)).copied().collect(),
    })
}

/// Seeded uniform sampling of `k` distinct demonstrations, without replacement.
pub fn select_demonstrations(train: &ExamDataset, k: usize, seed: u64) -> Result<Vec<Question>, DatasetError> {
    let pool: Vec<&Question> = train.active().collect();
    if k > pool.len() {
        return Err(DatasetError::NotEnoughDemonstrations { k, available: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect())
}
