//! Answer prompts (few-shot exemplars, step-by-step scaffold, optional
//! retrieved context) and extraction of the chosen option from replies.

use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::gateway::{ChatRequest, ANSWER_TEMPERATURE};
use crate::retrieval::{Chunk, Document};

const BUILTIN_FEWSHOTS: &str = include_str!("../assets/fewshots.json");
const DEFAULT_SYSTEM: &str = include_str!("../assets/system.txt");
const DEFAULT_COT: &str = include_str!("../assets/cot.txt");
const DEFAULT_FINAL: &str = include_str!("../assets/final.txt");

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 5;

/// An option letter, `A` through `E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(char);

impl Label {
    pub fn new(c: char) -> Option<Self> {
        let c = c.to_ascii_uppercase();
        ('A'..='E').contains(&c).then_some(Self(c))
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < MAX_OPTIONS).then(|| Self((b'A' + i as u8) as char))
    }

    pub fn as_char(self) -> char {
        self.0
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Label::new(c).ok_or_else(|| serde::de::Error::custom(format!("bad label {s:?}")))
            }
            _ => Err(serde::de::Error::custom(format!("bad label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOption {
    pub label: Label,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub item_id: String,
    pub question: String,
    pub options: Vec<McqOption>,
    pub gold: Label,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub topic: String,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), PromptError> {
        validate_options(&self.options)?;
        if self.question.trim().is_empty() {
            return Err(PromptError::InvalidItem("empty question".into()));
        }
        if !self.options.iter().any(|o| o.label == self.gold) {
            return Err(PromptError::InvalidItem(format!(
                "gold label {} is not among the options",
                self.gold
            )));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.options.iter().map(|o| o.label).collect()
    }

    /// `A. text` lines, in label order.
    pub fn option_lines(&self) -> Vec<String> {
        self.options
            .iter()
            .map(|o| format!("{}. {}", o.label, o.text))
            .collect()
    }
}

fn validate_options(options: &[McqOption]) -> Result<(), PromptError> {
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&options.len()) {
        return Err(PromptError::OptionCountOutOfRange(options.len()));
    }
    for (i, o) in options.iter().enumerate() {
        if o.label.index() != i {
            return Err(PromptError::InvalidItem(format!(
                "option {} has label {}, expected {}",
                i + 1,
                o.label,
                Label::from_index(i).unwrap()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Halo,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Halo => "halo",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Mode::Baseline),
            "halo" => Ok(Mode::Halo),
            other => Err(format!(
                "unknown mode {other:?} (expected baseline or halo)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub context_chunks: Vec<String>,
    pub mode: Mode,
}

impl PromptBundle {
    pub fn to_request(&self, model_id: &str, max_output_tokens: u32) -> ChatRequest {
        ChatRequest {
            system_text: self.system_text.clone(),
            user_text: self.user_text.clone(),
            temperature: ANSWER_TEMPERATURE,
            max_output_tokens,
            model_id: model_id.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRule {
    ExactLetter,
    AnswerPhrase,
    OptionTextMatch,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub choice: Option<Label>,
    pub raw: String,
    pub parse_rule: ParseRule,
}

impl ParsedAnswer {
    pub fn failed(raw: impl Into<String>) -> Self {
        Self {
            choice: None,
            raw: raw.into(),
            parse_rule: ParseRule::Failed,
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("items need {MIN_OPTIONS} to {MAX_OPTIONS} options, got {0}")]
    OptionCountOutOfRange(usize),
    #[error("invalid item: {0}")]
    InvalidItem(String),
    #[error("halo mode needs context chunks or an explicit degraded-context flag")]
    MissingContext,
    #[error("malformed exemplar file{}: {message}", .index.map(|i| format!(" (exemplar {i})")).unwrap_or_default())]
    MalformedExemplarFile {
        index: Option<usize>,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub options: Vec<McqOption>,
    pub reasoning: String,
    pub answer: Label,
}

#[derive(Deserialize)]
struct RawExemplar {
    question: Option<String>,
    options: Option<Vec<McqOption>>,
    reasoning: Option<String>,
    answer: Option<Label>,
}

/// Parses an exemplar file. Syntax errors carry line and column, content
/// errors the 0-based exemplar index.
pub fn parse_fewshots(text: &str) -> Result<Vec<Exemplar>, PromptError> {
    let malformed = |index, message| PromptError::MalformedExemplarFile { index, message };
    let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| {
        malformed(
            None,
            format!("line {} column {}: {e}", e.line(), e.column()),
        )
    })?;
    if values.is_empty() {
        return Err(malformed(None, "no exemplars".into()));
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let raw: RawExemplar =
                serde_json::from_value(v).map_err(|e| malformed(Some(i), e.to_string()))?;
            let missing = |field: &str| malformed(Some(i), format!("missing {field}"));
            let ex = Exemplar {
                question: raw
                    .question
                    .filter(|q| !q.trim().is_empty())
                    .ok_or_else(|| missing("question"))?,
                options: raw.options.ok_or_else(|| missing("options"))?,
                reasoning: raw.reasoning.ok_or_else(|| missing("reasoning"))?,
                answer: raw.answer.ok_or_else(|| missing("answer"))?,
            };
            validate_options(&ex.options).map_err(|e| malformed(Some(i), e.to_string()))?;
            if !ex.options.iter().any(|o| o.label == ex.answer) {
                return Err(malformed(
                    Some(i),
                    format!("answer {} is not an option", ex.answer),
                ));
            }
            Ok(ex)
        })
        .collect()
}

/// Loads exemplars from `path`, or the two built-in ones when `None`.
pub fn load_fewshots(path: Option<&Path>) -> Result<Vec<Exemplar>, PromptError> {
    match path {
        None => parse_fewshots(BUILTIN_FEWSHOTS),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| PromptError::Io {
                path: p.display().to_string(),
                source,
            })?;
            parse_fewshots(&text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub system: String,
    pub cot_instructions: String,
    pub final_instruction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM.trim_end().to_string(),
            cot_instructions: DEFAULT_COT.trim_end().to_string(),
            final_instruction: DEFAULT_FINAL.trim_end().to_string(),
        }
    }
}

impl PromptTemplates {
    /// Defaults, overridden by `system.txt`, `cot.txt` and `final.txt` when
    /// present in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Self::default();
        for (file, slot) in [
            ("system.txt", &mut t.system),
            ("cot.txt", &mut t.cot_instructions),
            ("final.txt", &mut t.final_instruction),
        ] {
            let p = dir.join(file);
            if p.exists() {
                *slot = std::fs::read_to_string(&p)
                    .map_err(|source| PromptError::Io {
                        path: p.display().to_string(),
                        source,
                    })?
                    .trim_end()
                    .to_string();
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone)]
pub struct PromptEngine {
    exemplars: Vec<Exemplar>,
    templates: PromptTemplates,
}

impl Default for PromptEngine {
    fn default() -> Self {
        Self::new(
            load_fewshots(None).expect("built-in exemplars are valid"),
            PromptTemplates::default(),
        )
    }
}

impl PromptEngine {
    pub fn new(exemplars: Vec<Exemplar>, templates: PromptTemplates) -> Self {
        Self {
            exemplars,
            templates,
        }
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    /// Renders the context block exactly as it appears inside a halo prompt.
    pub fn context_section(chunks: &[Chunk]) -> String {
        let mut out = String::from("CONTEXT:\n");
        if chunks.is_empty() {
            out.push_str("(no relevant documents were retrieved)\n");
        }
        for (i, c) in chunks.iter().enumerate() {
            out.push_str(&format!(
                "[{}] [Source: {}] {}\n",
                i + 1,
                Document::attribution(&c.parent_doc_id),
                c.text
            ));
        }
        out.push('\n');
        out
    }

    /// Builds the answer prompt. Halo mode with no chunks is only allowed
    /// when `degraded_context` is set, and renders an explicit empty context.
    pub fn assemble(
        &self,
        item: &McqItem,
        chunks: &[Chunk],
        mode: Mode,
        degraded_context: bool,
    ) -> Result<PromptBundle, PromptError> {
        item.validate()?;
        if mode == Mode::Halo && chunks.is_empty() && !degraded_context {
            return Err(PromptError::MissingContext);
        }
        let mut user = String::new();
        user.push_str("Here are examples of the expected answer format.\n\n");
        for (i, ex) in self.exemplars.iter().enumerate() {
            user.push_str(&format!(
                "Example {}\nQuestion: {}\nOptions:\n",
                i + 1,
                ex.question
            ));
            for o in &ex.options {
                user.push_str(&format!("{}. {}\n", o.label, o.text));
            }
            user.push_str(&format!(
                "Reasoning:\n{}\nAnswer: {}\n\n",
                ex.reasoning, ex.answer
            ));
        }
        user.push_str(&self.templates.cot_instructions);
        user.push_str("\n\n");
        let context_chunks = match mode {
            Mode::Baseline => Vec::new(),
            Mode::Halo => {
                user.push_str(&Self::context_section(chunks));
                chunks.iter().map(Chunk::id).collect()
            }
        };
        user.push_str(&format!("QUESTION:\n{}\n\nOPTIONS:\n", item.question));
        for line in item.option_lines() {
            user.push_str(&line);
            user.push('\n');
        }
        user.push('\n');
        user.push_str(&self.templates.final_instruction);
        Ok(PromptBundle {
            system_text: self.templates.system.clone(),
            user_text: user,
            context_chunks,
            mode,
        })
    }
}

static ANSWER_PHRASE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)answer\s*(?:is)?\s*[:\-]?\s*[\("'`]*([A-E])\b[\)"'`.]?"#).unwrap()
});

/// Extracts the chosen option. Rules, first hit wins:
/// 1. the whole reply (trimmed of whitespace and wrapping punctuation) is a
///    valid label;
/// 2. the last "answer (is): X" phrase naming a valid label;
/// 3. exactly one option's text appears in the last non-empty line.
pub fn parse_answer(raw: &str, options: &[McqOption]) -> ParsedAnswer {
    let valid = |l: Label| options.iter().any(|o| o.label == l);
    let found = |choice, parse_rule| ParsedAnswer {
        choice: Some(choice),
        raw: raw.to_string(),
        parse_rule,
    };

    let stripped = raw
        .trim()
        .trim_matches(|c: char| c.is_whitespace() || "().[]\"'`*".contains(c));
    let mut chars = stripped.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if let Some(l) = Label::new(c).filter(|&l| valid(l)) {
            return found(l, ParseRule::ExactLetter);
        }
    }

    let last_phrase = ANSWER_PHRASE
        .captures_iter(raw)
        .filter_map(|c| c[1].chars().next().and_then(Label::new))
        .filter(|&l| valid(l))
        .last();
    if let Some(l) = last_phrase {
        return found(l, ParseRule::AnswerPhrase);
    }

    if let Some(last_line) = raw.lines().rev().find(|l| !l.trim().is_empty()) {
        let line = last_line.to_lowercase();
        let mut hits = options
            .iter()
            .filter(|o| !o.text.trim().is_empty() && line.contains(&o.text.trim().to_lowercase()));
        if let (Some(o), None) = (hits.next(), hits.next()) {
            return found(o.label, ParseRule::OptionTextMatch);
        }
    }
    ParsedAnswer::failed(raw)
}
