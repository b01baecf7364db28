//! Exam-faithful evaluation of chat models on multi-proposition
//! multiple-choice law exams.
//!
//! The crate is organised along the evaluation flow:
//!
//! - [`dataset`]: the question schema, dataset files, year splits and
//!   demonstration sampling.
//! - [`answer_format`]: the strict answer grammar.
//! - [`scoring`]: per-question partial credit, per-subject aggregation and the
//!   pass rule.
//! - [`prompts`]: prompt templates and message assembly.
//! - [`backend`]: the model interface and its oracle, scripted, replay and
//!   HTTP implementations.
//! - [`pipeline`]: zero-shot, few-shot, self-verification and multi-agent
//!   inference over a dataset.
//! - [`report`]: summaries over repeated runs and their renderings.
//! - [`harness`]: resolved run configuration, run directories and replay.

pub mod answer_format;
pub mod backend;
pub mod dataset;
mod digest;
pub mod harness;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod scoring;
pub mod transcript;
