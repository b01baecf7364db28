//! Run summaries and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Subject;
use crate::pipeline::EvaluationRun;
use crate::scoring::{GradedExam, PassRule};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("evaluation run has no repeats")]
    NoRepeats,
    #[error("evaluation run has no graded questions")]
    NoQuestions,
    #[error("summary line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// How exact-match accuracy combines repeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyPooling {
    /// All question attempts across repeats count equally.
    #[default]
    Pooled,
    /// Mean of per-repeat accuracies.
    MeanOfRepeats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamScale {
    pub avg: f64,
    pub min: u32,
    pub max: u32,
}

/// One model's results over all repeats of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub model: String,
    pub accuracy: f64,
    pub accuracy_pooling: AccuracyPooling,
    pub exact_matches: u64,
    pub question_attempts: u64,
    pub exam_scale: ExamScale,
    /// Exam total of each repeat, in repeat order.
    pub repeat_totals: Vec<u32>,
    /// Subject score of each repeat, in repeat order.
    pub per_subject_totals: BTreeMap<Subject, Vec<u32>>,
    pub per_subject_avg: BTreeMap<Subject, f64>,
    pub pass_per_repeat: Vec<bool>,
    pub incomplete: bool,
    pub config_fingerprint: String,
}

pub fn summarize(run: &EvaluationRun, model: &str, fingerprint: &str) -> Result<EvaluationSummary, ReportError> {
    summarize_with(run, model, fingerprint, AccuracyPooling::Pooled)
}

pub fn summarize_with(
    run: &EvaluationRun,
    model: &str,
    fingerprint: &str,
    pooling: AccuracyPooling,
) -> Result<EvaluationSummary, ReportError> {
    summarize_graded(run.repeats.iter().map(|r| &r.graded), run.incomplete, model, fingerprint, pooling)
}

/// Summarizes already graded repeats.
pub fn summarize_graded<'a>(
    repeats: impl IntoIterator<Item = &'a GradedExam>,
    incomplete: bool,
    model: &str,
    fingerprint: &str,
    pooling: AccuracyPooling,
) -> Result<EvaluationSummary, ReportError> {
    let repeats: Vec<&GradedExam> = repeats.into_iter().collect();
    if repeats.is_empty() {
        return Err(ReportError::NoRepeats);
    }
    if repeats.iter().any(|g| g.results.is_empty()) {
        return Err(ReportError::NoQuestions);
    }
    let exact_per_repeat: Vec<(u64, u64)> = repeats
        .iter()
        .map(|g| (g.results.iter().filter(|r| r.exact_match).count() as u64, g.results.len() as u64))
        .collect();
    let exact_matches: u64 = exact_per_repeat.iter().map(|(e, _)| e).sum();
    let question_attempts: u64 = exact_per_repeat.iter().map(|(_, n)| n).sum();
    let accuracy = match pooling {
        AccuracyPooling::Pooled => exact_matches as f64 / question_attempts as f64,
        AccuracyPooling::MeanOfRepeats => {
            exact_per_repeat.iter().map(|&(e, n)| e as f64 / n as f64).sum::<f64>() / repeats.len() as f64
        }
    };

    let repeat_totals: Vec<u32> = repeats.iter().map(|g| g.score.total).collect();
    let n = repeats.len() as f64;
    let mut per_subject_totals = BTreeMap::new();
    for subject in Subject::ALL {
        let totals = repeats.iter().map(|g| g.score.per_subject.get(&subject).copied().unwrap_or(0)).collect();
        per_subject_totals.insert(subject, totals);
    }
    let per_subject_avg = per_subject_totals
        .iter()
        .map(|(s, totals): (&Subject, &Vec<u32>)| (*s, totals.iter().map(|&t| f64::from(t)).sum::<f64>() / n))
        .collect();

    Ok(EvaluationSummary {
        model: model.to_string(),
        accuracy,
        accuracy_pooling: pooling,
        exact_matches,
        question_attempts,
        exam_scale: ExamScale {
            avg: repeat_totals.iter().map(|&t| f64::from(t)).sum::<f64>() / n,
            min: repeat_totals.iter().copied().min().unwrap_or(0),
            max: repeat_totals.iter().copied().max().unwrap_or(0),
        },
        repeat_totals,
        per_subject_totals,
        per_subject_avg,
        pass_per_repeat: repeats.iter().map(|g| g.score.pass).collect(),
        incomplete,
        config_fingerprint: fingerprint.to_string(),
    })
}

/// `num / den` rounded half-up to `places` decimals. `den` must be non-zero.
pub fn format_ratio(num: u64, den: u64, places: u32) -> String {
    let scale = 10u128.pow(places);
    let scaled = (u128::from(num) * scale * 2 + u128::from(den)) / (2 * u128::from(den));
    if places == 0 {
        return scaled.to_string();
    }
    format!("{}.{:0width$}", scaled / scale, scaled % scale, width = places as usize)
}

impl EvaluationSummary {
    pub fn accuracy_text(&self) -> String {
        match self.accuracy_pooling {
            AccuracyPooling::Pooled => format_ratio(self.exact_matches, self.question_attempts, 4),
            AccuracyPooling::MeanOfRepeats => format!("{:.4}", self.accuracy),
        }
    }

    pub fn exam_scale_text(&self) -> String {
        let sum: u64 = self.repeat_totals.iter().map(|&t| u64::from(t)).sum();
        format!(
            "{} ({}/{})",
            format_ratio(sum, self.repeat_totals.len() as u64, 1),
            self.exam_scale.min,
            self.exam_scale.max
        )
    }

    pub fn subject_text(&self, subject: Subject) -> String {
        match self.per_subject_totals.get(&subject) {
            Some(totals) if !totals.is_empty() => {
                let sum: u64 = totals.iter().map(|&t| u64::from(t)).sum();
                format_ratio(sum, totals.len() as u64, 1)
            }
            _ => "-".to_string(),
        }
    }

    fn row(&self) -> Vec<String> {
        let mut row = vec![self.model.clone(), self.accuracy_text(), self.exam_scale_text()];
        row.extend(Subject::ALL.iter().map(|&s| self.subject_text(s)));
        row
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Markdown,
    Jsonl,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "markdown" | "md" => Ok(Self::Markdown),
            "jsonl" | "json" => Ok(Self::Jsonl),
            other => Err(format!("unknown report format {other:?} (expected text, markdown or jsonl)")),
        }
    }
}

fn header() -> Vec<String> {
    let mut h: Vec<String> = ["Model", "Accuracy", "Exam Scale (Avg/Min/Max)"].map(String::from).to_vec();
    h.extend(Subject::ALL.iter().map(|s| s.column_label().to_string()));
    h
}

fn pass_row(rule: &PassRule) -> Vec<String> {
    let max: u32 = rule.subject_max.values().sum();
    let mut row = vec!["Passing score".to_string(), "N/A".to_string(), format!("{} (out of {max})", rule.pass_threshold)];
    row.extend(Subject::ALL.iter().map(|&s| rule.floor(s).to_string()));
    row
}

/// Renders one row per summary. `pass_rule` appends a row with the pass
/// threshold and subject floors (ignored for JSONL).
pub fn render(summaries: &[EvaluationSummary], format: ReportFormat, pass_rule: Option<&PassRule>) -> String {
    if format == ReportFormat::Jsonl {
        return summaries
            .iter()
            .map(|s| serde_json::to_string(s).expect("summary serializes") + "\n")
            .collect();
    }
    let mut rows = vec![header()];
    rows.extend(summaries.iter().map(EvaluationSummary::row));
    rows.extend(pass_rule.map(pass_row));
    match format {
        ReportFormat::Markdown => render_markdown(&rows),
        _ => render_text(&rows),
    }
}

fn render_text(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let pad = widths[c] - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            writeln!(out, "{}", rule.join("  ")).unwrap();
        }
    }
    out
}

fn render_markdown(rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        writeln!(out, "| {} |", row.join(" | ")).unwrap();
        if i == 0 {
            let align: Vec<&str> = (0..row.len()).map(|c| if c == 0 { "---" } else { "---:" }).collect();
            writeln!(out, "| {} |", align.join(" | ")).unwrap();
        }
    }
    out
}

/// Reads summaries written with [`ReportFormat::Jsonl`].
pub fn parse_summaries(text: &str) -> Result<Vec<EvaluationSummary>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ReportError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

/// Per-question and per-subject breakdown of one graded exam.
pub fn render_score(graded: &GradedExam) -> String {
    let mut out = String::new();
    let id_width = graded.results.iter().map(|r| r.question_id.len()).max().unwrap_or(2).max(2);
    writeln!(out, "{:id_width$}  {:7}  {:>8}  answer", "id", "subject", "points").unwrap();
    for r in &graded.results {
        let points = format!("{}/{}", r.points_awarded, r.points_possible);
        let mark = if r.exact_match { "" } else { " x" };
        writeln!(out, "{:id_width$}  {:7}  {points:>8}  {}{mark}", r.question_id, r.subject.column_label(), r.predicted.answer_text())
            .unwrap();
    }
    writeln!(out).unwrap();
    let score = &graded.score;
    for subject in Subject::ALL {
        let got = score.per_subject.get(&subject).copied().unwrap_or(0);
        let floor = score.subject_floors.get(&subject).copied().unwrap_or(0);
        let status = if got >= floor { "ok" } else { "below floor" };
        writeln!(out, "{:7} {got:>3} (floor {floor}, {status})", subject.column_label()).unwrap();
    }
    writeln!(
        out,
        "total   {:>3} (threshold {}) {}",
        score.total,
        score.pass_threshold,
        if score.pass { "PASS" } else { "FAIL" }
    )
    .unwrap();
    if !graded.missing.is_empty() {
        writeln!(out, "missing answers: {}", graded.missing.join(", ")).unwrap();
    }
    out
}
