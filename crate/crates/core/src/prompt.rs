//! System message construction and prompt assembly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ActivitySet;

/// Label preceding the bracketed list in assistant answers.
pub const ANSWER_LABEL: &str = "Consistent activities:";

/// Estimated units above which a prompt is reported as oversized. Sits
/// above the bundled DOMINO prompt with all 21 examples selected.
pub const DEFAULT_PROMPT_BUDGET: usize = 3000;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template preamble has no {{activities}} slot")]
    MissingSlot,
    #[error("template needs at least 3 steps, found {0}")]
    TooFewSteps(usize),
    #[error("output format must show a square-bracket list")]
    NoBracketFormat,
    #[error("parsing template: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Ordered chat messages; serializes as a bare message array.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt {
    pub messages: Vec<Message>,
}

impl Prompt {
    /// Number of few-shot example exchanges in the prompt.
    pub fn example_count(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemMessageTemplate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub preamble: String,
    pub steps: Vec<String>,
    pub output_format: String,
}

impl SystemMessageTemplate {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let template: Self = serde_json::from_str(text)?;
        template.check()?;
        Ok(template)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn check(&self) -> Result<(), PromptError> {
        if !self.preamble.contains("{activities}") {
            return Err(PromptError::MissingSlot);
        }
        if self.steps.len() < 3 {
            return Err(PromptError::TooFewSteps(self.steps.len()));
        }
        match (self.output_format.find('['), self.output_format.rfind(']')) {
            (Some(open), Some(close)) if open < close => Ok(()),
            _ => Err(PromptError::NoBracketFormat),
        }
    }
}

/// `[A, B, C]`, the answer format the extractor parses.
pub fn format_activity_list<S: AsRef<str>>(names: &[S]) -> String {
    let joined: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
    format!("[{}]", joined.join(", "))
}

pub fn build_system_message(
    template: &SystemMessageTemplate,
    acts: &ActivitySet,
) -> Result<String, PromptError> {
    template.check()?;
    let mut text = template
        .preamble
        .replace("{activities}", &acts.names().join(", "));
    text.push_str("\n\nFollow these steps:");
    for (i, step) in template.steps.iter().enumerate() {
        text.push_str(&format!("\n{}. {}", i + 1, step));
    }
    text.push_str("\n\nOutput format: ");
    text.push_str(&template.output_format);
    Ok(text)
}

/// One few-shot exchange: an example's rendered context and its answer.
#[derive(Debug, Clone, Copy)]
pub struct ExampleTurn<'a> {
    pub description: &'a str,
    pub consistent: &'a [String],
    pub note: Option<&'a str>,
}

/// The assistant side of an example exchange. Always ends with the
/// bracketed list.
pub fn example_answer(consistent: &[String], note: Option<&str>) -> String {
    let list = format_activity_list(consistent);
    match note {
        Some(note) if !note.trim().is_empty() => {
            format!("Reasoning: {}\n{ANSWER_LABEL} {list}", note.trim())
        }
        _ => format!("{ANSWER_LABEL} {list}"),
    }
}

/// System message, then one user/assistant pair per example, then the
/// context description.
pub fn assemble(system: &str, examples: &[ExampleTurn<'_>], context_text: &str) -> Prompt {
    let mut messages = Vec::with_capacity(2 + 2 * examples.len());
    messages.push(Message::new(Role::System, system));
    for ex in examples {
        messages.push(Message::new(Role::User, ex.description));
        messages.push(Message::new(
            Role::Assistant,
            example_answer(ex.consistent, ex.note),
        ));
    }
    messages.push(Message::new(Role::User, context_text));
    Prompt { messages }
}

/// Rough size in tokens: one unit per four characters, rounded up.
pub fn estimate_length(prompt: &Prompt) -> usize {
    let chars: usize = prompt
        .messages
        .iter()
        .map(|m| m.content.chars().count())
        .sum();
    chars.div_ceil(4)
}
