//! Prompt templates and message assembly.
//!
//! Templates are plain-text assets with a small header:
//!
//! ```text
//! id: verification
//! role: user
//! language: ja
//! placeholders: question, answer
//! ---
//! body with {question} and {answer}
//! ```
//!
//! The built-in set is compiled in from `templates/`; a directory holding the
//! same ids can replace it per experiment. Rendering is a single pass, so text
//! substituted into a placeholder is never expanded again.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer_format::{render_answer, ParsedAnswer};
use crate::dataset::Question;

/// Placeholder names a template body may use.
pub const PLACEHOLDERS: [&str; 5] = ["question", "answer", "knowledge", "candidates", "demonstrations"];

pub const SYSTEM_ROLE: &str = "system_role";
pub const ANSWER_FORMAT: &str = "answer_format";
pub const ANSWER_REQUEST: &str = "answer_request";
pub const DEMONSTRATION: &str = "demonstration";
pub const VERIFICATION: &str = "verification";
pub const AGENT_RETRIEVER: &str = "agent_retriever";
pub const AGENT_VERIFIER: &str = "agent_verifier";
pub const AGENT_EXTRACTOR: &str = "agent_extractor";
pub const AGENT_REASONER: &str = "agent_reasoner";

const BUILTIN: [(&str, &str); 9] = [
    (SYSTEM_ROLE, include_str!("../templates/system_role.tpl")),
    (ANSWER_FORMAT, include_str!("../templates/answer_format.tpl")),
    (ANSWER_REQUEST, include_str!("../templates/answer_request.tpl")),
    (DEMONSTRATION, include_str!("../templates/demonstration.tpl")),
    (VERIFICATION, include_str!("../templates/verification.tpl")),
    (AGENT_RETRIEVER, include_str!("../templates/agent_retriever.tpl")),
    (AGENT_VERIFIER, include_str!("../templates/agent_verifier.tpl")),
    (AGENT_EXTRACTOR, include_str!("../templates/agent_extractor.tpl")),
    (AGENT_REASONER, include_str!("../templates/agent_reasoner.tpl")),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {file}: {message}")]
    InvalidTemplate { file: String, message: String },
    #[error("template {0:?} is not registered")]
    MissingTemplate(String),
    #[error("template {template:?}: no binding for placeholder {{{placeholder}}}")]
    MissingBinding { template: String, placeholder: String },
    #[error("{role} prompt requires {field}")]
    MissingAgentBinding { role: AgentRole, field: &'static str },
    #[error("question {0:?} has no text to render")]
    EmptyQuestion(String),
    #[error("retriever needs at least one candidate")]
    NoCandidates,
    #[error("cannot read template directory {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    Ja,
    En,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// Ordered chat messages sent to a backend.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageSequence(pub Vec<Message>);

impl MessageSequence {
    pub fn push(&mut self, role: Role, content: impl Into<String>) {
        self.0.push(Message { role, content: content.into() });
    }

    pub fn messages(&self) -> &[Message] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn last_user(&self) -> Option<&str> {
        self.0.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }

    /// Concatenated text of every message, for containment scans.
    pub fn full_text(&self) -> String {
        self.0.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }

    /// Merges leading system messages into the first user message, for
    /// backends without a system role.
    pub fn fold_system(&self) -> MessageSequence {
        let mut system = Vec::new();
        let mut rest = Vec::new();
        for m in &self.0 {
            if m.role == Role::System && rest.is_empty() {
                system.push(m.content.clone());
            } else {
                rest.push(m.clone());
            }
        }
        if system.is_empty() {
            return self.clone();
        }
        match rest.iter_mut().find(|m| m.role == Role::User) {
            Some(first_user) => first_user.content = format!("{}\n\n{}", system.join("\n\n"), first_user.content),
            None => rest.insert(0, Message { role: Role::User, content: system.join("\n\n") }),
        }
        MessageSequence(rest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A parsed template asset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub role: Role,
    pub language: Language,
    pub placeholders: Vec<String>,
    pub body: String,
    /// SHA-256 of the asset file.
    pub hash: String,
    segments: Vec<Segment>,
}

fn split_segments(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after.find(|c: char| !(c.is_ascii_lowercase() || c == '_')).unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            literal.push_str(&rest[..open]);
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Placeholder(after[..name_len].to_string()));
            rest = &after[name_len + 1..];
        } else {
            literal.push_str(&rest[..=open]);
            rest = after;
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

impl Template {
    pub fn parse(file: &str, text: &str) -> Result<Self, PromptError> {
        let invalid = |message: String| PromptError::InvalidTemplate { file: file.to_string(), message };
        let (header, body) = text
            .split_once("\n---\n")
            .ok_or_else(|| invalid("missing `---` header separator".into()))?;
        let body = body.strip_suffix('\n').unwrap_or(body).to_string();
        let mut fields = BTreeMap::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(':').ok_or_else(|| invalid(format!("bad header line {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |name: &str| fields.get(name).cloned().ok_or_else(|| invalid(format!("missing header `{name}`")));
        let id = field("id")?;
        let role = match field("role")?.as_str() {
            "system" => Role::System,
            "user" => Role::User,
            other => return Err(invalid(format!("unsupported role {other:?}"))),
        };
        let language = match field("language")?.as_str() {
            "ja" => Language::Ja,
            "en" => Language::En,
            other => return Err(invalid(format!("unsupported language {other:?}"))),
        };
        let placeholders: Vec<String> = fields
            .get("placeholders")
            .map(|p| p.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default();
        for p in &placeholders {
            if !PLACEHOLDERS.contains(&p.as_str()) {
                return Err(invalid(format!("unknown placeholder {p:?}")));
            }
        }
        let segments = split_segments(&body);
        for seg in &segments {
            if let Segment::Placeholder(name) = seg {
                if !placeholders.contains(name) {
                    return Err(invalid(format!("body uses undeclared placeholder {{{name}}}")));
                }
            }
        }
        Ok(Template {
            id,
            role,
            language,
            placeholders,
            body,
            hash: crate::digest::sha256_hex(text),
            segments,
        })
    }

    /// Substitutes every placeholder; all must be bound.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => {
                    let value = bindings.iter().find(|(k, _)| k == name).map(|(_, v)| *v).ok_or_else(|| {
                        PromptError::MissingBinding { template: self.id.clone(), placeholder: name.clone() }
                    })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    /// Literal text directly before and after placeholder `name`.
    fn surroundings(&self, name: &str) -> Option<(&str, &str)> {
        let idx = self.segments.iter().position(|s| matches!(s, Segment::Placeholder(n) if n == name))?;
        let lit = |i: Option<usize>| match i.and_then(|i| self.segments.get(i)) {
            Some(Segment::Literal(t)) => t.as_str(),
            _ => "",
        };
        Some((lit(idx.checked_sub(1)), lit(Some(idx + 1))))
    }

    /// First line of the body, used to recognise rendered prompts.
    fn marker(&self) -> &str {
        self.body.lines().next().unwrap_or("")
    }
}

/// Immutable set of templates keyed by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, text)| {
                let t = Template::parse(id, text).expect("built-in templates are valid");
                (t.id.clone(), t)
            })
            .collect();
        TemplateRegistry { templates }
    }

    /// Loads every `*.tpl` file in `dir`. All built-in ids must be present.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| PromptError::Io { path: dir.display().to_string(), message: e.to_string() };
        let mut templates = BTreeMap::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir).map_err(io)?.collect::<Result<_, _>>().map_err(io)?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("tpl") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(io)?;
            let t = Template::parse(&path.display().to_string(), &text)?;
            templates.insert(t.id.clone(), t);
        }
        for (id, _) in BUILTIN {
            if !templates.contains_key(id) {
                return Err(PromptError::MissingTemplate(id.to_string()));
            }
        }
        Ok(TemplateRegistry { templates })
    }

    pub fn get(&self, id: &str) -> Result<&Template, PromptError> {
        self.templates.get(id).ok_or_else(|| PromptError::MissingTemplate(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates.iter().map(|(id, t)| (id.clone(), t.hash.clone())).collect()
    }
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Retriever,
    Verifier,
    Extractor,
    Reasoner,
}

impl AgentRole {
    pub const ALL: [AgentRole; 4] = [AgentRole::Retriever, AgentRole::Verifier, AgentRole::Extractor, AgentRole::Reasoner];

    fn template_id(self) -> &'static str {
        match self {
            AgentRole::Retriever => AGENT_RETRIEVER,
            AgentRole::Verifier => AGENT_VERIFIER,
            AgentRole::Extractor => AGENT_EXTRACTOR,
            AgentRole::Reasoner => AGENT_REASONER,
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentRole::Retriever => "retriever",
            AgentRole::Verifier => "verifier",
            AgentRole::Extractor => "extractor",
            AgentRole::Reasoner => "reasoner",
        })
    }
}

/// What a rendered prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Answer,
    Verification,
    Agent(AgentRole),
}

/// A numbered past question offered to the retriever or verifier.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub number: usize,
    pub question: &'a Question,
}

/// Inputs for an agent prompt. Each role requires a different subset.
#[derive(Debug, Clone, Copy, Default)]
pub struct AgentBindings<'a> {
    pub question: Option<&'a Question>,
    pub candidates: Option<&'a [Candidate<'a>]>,
    pub knowledge: Option<&'a [String]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptOptions {
    /// Send the system-role template as the first message.
    pub include_system_role: bool,
    /// Place few-shot demonstrations in the system message instead of the
    /// user message.
    pub demonstrations_in_system: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self { include_system_role: true, demonstrations_in_system: false }
    }
}

/// The question as shown to the model: preamble, labelled statements, then
/// numbered options.
pub fn render_question(q: &Question) -> String {
    let mut lines = Vec::with_capacity(1 + q.statements.len() + q.options.len());
    if !q.preamble.trim().is_empty() {
        lines.push(q.preamble.trim_end().to_string());
    }
    lines.extend(q.statements.iter().map(|s| format!("{}．{}", s.label, s.text)));
    lines.extend(q.options.iter().enumerate().map(|(i, o)| format!("{}．{}", i + 1, o)));
    lines.join("\n")
}

fn question_text(q: &Question) -> Result<String, PromptError> {
    let text = render_question(q);
    if text.trim().is_empty() {
        return Err(PromptError::EmptyQuestion(q.id.clone()));
    }
    Ok(text)
}

/// Renders templates into message sequences.
#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    templates: TemplateRegistry,
    options: PromptOptions,
}

impl PromptBuilder {
    pub fn new(templates: TemplateRegistry, options: PromptOptions) -> Self {
        Self { templates, options }
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.templates
    }

    pub fn options(&self) -> PromptOptions {
        self.options
    }

    fn body(&self, id: &str) -> Result<&str, PromptError> {
        Ok(self.templates.get(id)?.body.as_str())
    }

    fn sequence(&self, system_extra: Option<String>, user: String) -> Result<MessageSequence, PromptError> {
        let mut messages = MessageSequence::default();
        let mut system = Vec::new();
        if self.options.include_system_role {
            system.push(self.body(SYSTEM_ROLE)?.to_string());
        }
        system.extend(system_extra);
        if !system.is_empty() {
            messages.push(Role::System, system.join("\n\n"));
        }
        messages.push(Role::User, user);
        Ok(messages)
    }

    /// One past question with its canonical answer.
    pub fn render_demonstration(&self, q: &Question) -> Result<String, PromptError> {
        let text = question_text(q)?;
        let answer = q.key.render();
        self.templates.get(DEMONSTRATION)?.render(&[("question", &text), ("answer", &answer)])
    }

    fn demonstration_block(&self, demos: &[Question]) -> Result<String, PromptError> {
        let rendered = demos.iter().map(|d| self.render_demonstration(d)).collect::<Result<Vec<_>, _>>()?;
        Ok(rendered.join("\n\n"))
    }

    /// System role, answer-format instruction, optional demonstrations and the
    /// target question.
    pub fn build_answer_prompt(&self, q: &Question, demos: &[Question]) -> Result<MessageSequence, PromptError> {
        let text = question_text(q)?;
        let block = self.demonstration_block(demos)?;
        let (system_extra, inline) = match (demos.is_empty(), self.options.demonstrations_in_system) {
            (true, _) => (None, String::new()),
            (false, true) => (Some(block), String::new()),
            (false, false) => (None, format!("{block}\n\n")),
        };
        let request = self
            .templates
            .get(ANSWER_REQUEST)?
            .render(&[("demonstrations", &inline), ("question", &text)])?;
        let user = format!("{}\n\n{}", self.body(ANSWER_FORMAT)?, request);
        self.sequence(system_extra, user)
    }

    pub fn build_verification_prompt(
        &self,
        q: &Question,
        initial: &ParsedAnswer,
    ) -> Result<MessageSequence, PromptError> {
        self.build_verification_prompt_raw(q, &render_answer(initial))
    }

    /// Verification prompt with arbitrary text in the answer slot, used when
    /// the initial response was not a valid answer.
    pub fn build_verification_prompt_raw(&self, q: &Question, answer: &str) -> Result<MessageSequence, PromptError> {
        let text = question_text(q)?;
        let user = self
            .templates
            .get(VERIFICATION)?
            .render(&[("question", &text), ("answer", answer)])?;
        self.sequence(None, user)
    }

    pub fn render_candidates(&self, candidates: &[Candidate<'_>]) -> Result<String, PromptError> {
        let rendered = candidates
            .iter()
            .map(|c| Ok(format!("【候補{}】\n{}", c.number, self.render_demonstration(c.question)?)))
            .collect::<Result<Vec<_>, PromptError>>()?;
        Ok(rendered.join("\n\n"))
    }

    pub fn build_agent_prompt(&self, role: AgentRole, bindings: &AgentBindings<'_>) -> Result<MessageSequence, PromptError> {
        let missing = |field| PromptError::MissingAgentBinding { role, field };
        let question = bindings.question.ok_or_else(|| missing("question"))?;
        let text = question_text(question)?;
        let template = self.templates.get(role.template_id())?;
        let user = match role {
            AgentRole::Retriever | AgentRole::Verifier => {
                let candidates = bindings.candidates.ok_or_else(|| missing("candidates"))?;
                if role == AgentRole::Retriever && candidates.is_empty() {
                    return Err(PromptError::NoCandidates);
                }
                let rendered = self.render_candidates(candidates)?;
                template.render(&[("question", &text), ("candidates", &rendered)])?
            }
            AgentRole::Extractor => {
                let answer = question.key.render();
                template.render(&[("question", &text), ("answer", &answer)])?
            }
            AgentRole::Reasoner => {
                let knowledge = bindings.knowledge.ok_or_else(|| missing("knowledge"))?.join("\n");
                let body = template.render(&[("knowledge", &knowledge), ("question", &text)])?;
                format!("{body}\n\n{}", self.body(ANSWER_FORMAT)?)
            }
        };
        self.sequence(None, user)
    }

    /// Recognises which template produced the final user message.
    pub fn classify(&self, messages: &MessageSequence) -> Option<PromptKind> {
        let user = messages.last_user()?;
        let starts = |id: &str| self.templates.get(id).map(|t| user.starts_with(t.marker())).unwrap_or(false);
        if starts(VERIFICATION) {
            Some(PromptKind::Verification)
        } else if let Some(role) = AgentRole::ALL.into_iter().find(|r| starts(r.template_id())) {
            Some(PromptKind::Agent(role))
        } else if starts(ANSWER_FORMAT) {
            Some(PromptKind::Answer)
        } else {
            None
        }
    }

    /// Recovers the text bound to `slot` in a rendered prompt: the question
    /// being asked about, or the answer under review.
    pub fn extract_slot(&self, messages: &MessageSequence, slot: &str) -> Option<String> {
        let kind = self.classify(messages)?;
        let mut user = messages.last_user()?;
        let template = match kind {
            PromptKind::Answer => {
                let format = self.body(ANSWER_FORMAT).ok()?;
                user = user.strip_prefix(format)?.strip_prefix("\n\n")?;
                self.templates.get(ANSWER_REQUEST).ok()?
            }
            PromptKind::Verification => self.templates.get(VERIFICATION).ok()?,
            PromptKind::Agent(role) => {
                if role == AgentRole::Reasoner {
                    let format = self.body(ANSWER_FORMAT).ok()?;
                    user = user.strip_suffix(format)?.strip_suffix("\n\n")?;
                }
                self.templates.get(role.template_id()).ok()?
            }
        };
        let (before, after) = template.surroundings(slot)?;
        let start = if before.is_empty() { 0 } else { user.rfind(before)? + before.len() };
        let rest = &user[start..];
        let end = if after.is_empty() { rest.len() } else { rest.find(after)? };
        Some(rest[..end].to_string())
    }
}
