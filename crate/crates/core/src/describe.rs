//! Natural-language rendering of a context window.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextSchema, ContextSnapshot, ContextValue};

/// Name substituted for the user in every description, so descriptions
/// (and therefore cache keys and embeddings) never depend on who the user is.
pub const DEFAULT_PERSONA: &str = "Bob";

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error("parsing phrase table: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("preamble must contain both {{z}} and {{u}} slots")]
    MissingSlot,
    #[error("phrase table has no fragment for ({variable}, {value})")]
    CoverageGap { variable: String, value: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRules {
    pub separator: String,
    pub last_separator: String,
    /// Text between the preamble and the first fragment.
    #[serde(default = "default_lead")]
    pub lead: String,
    #[serde(default = "default_terminator")]
    pub terminator: String,
}

fn default_lead() -> String {
    " ".into()
}

fn default_terminator() -> String {
    ".".into()
}

fn default_persona() -> String {
    DEFAULT_PERSONA.into()
}

/// Per-dataset mapping from context values to sentence fragments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseTable {
    pub preamble: String,
    pub join: JoinRules,
    #[serde(default = "default_persona")]
    pub persona: String,
    pub phrases: BTreeMap<String, BTreeMap<String, String>>,
}

impl PhraseTable {
    /// Parses a phrase table and checks it covers every allowed value of `schema`.
    pub fn from_json(text: &str, schema: &ContextSchema) -> Result<Self, DescribeError> {
        let table: PhraseTable = serde_json::from_str(text)?;
        table.check(schema)?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>, schema: &ContextSchema) -> Result<Self, DescribeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DescribeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, schema)
    }

    pub fn check(&self, schema: &ContextSchema) -> Result<(), DescribeError> {
        if !self.preamble.contains("{z}") || !self.preamble.contains("{u}") {
            return Err(DescribeError::MissingSlot);
        }
        for var in schema.variables() {
            for value in &var.values {
                self.fragment(&var.name, value)?;
            }
        }
        Ok(())
    }

    fn fragment(&self, variable: &str, value: &str) -> Result<&str, DescribeError> {
        self.phrases
            .get(variable)
            .and_then(|m| m.get(value))
            .map(String::as_str)
            .ok_or_else(|| DescribeError::CoverageGap {
                variable: variable.to_string(),
                value: value.to_string(),
            })
    }
}

/// A schema paired with a phrase table that is known to cover it.
#[derive(Debug, Clone)]
pub struct Renderer {
    schema: ContextSchema,
    table: PhraseTable,
}

impl Renderer {
    pub fn new(schema: ContextSchema, table: PhraseTable) -> Result<Self, DescribeError> {
        table.check(&schema)?;
        Ok(Self { schema, table })
    }

    pub fn schema(&self) -> &ContextSchema {
        &self.schema
    }

    pub fn table(&self) -> &PhraseTable {
        &self.table
    }

    pub fn render(&self, snap: &ContextSnapshot) -> Result<String, DescribeError> {
        render(&self.schema, &self.table, snap)
    }
}

/// Renders `snap` as a single sentence.
///
/// Variables appear in schema order; unknown variables are left out.
pub fn render(
    schema: &ContextSchema,
    table: &PhraseTable,
    snap: &ContextSnapshot,
) -> Result<String, DescribeError> {
    let mut fragments = Vec::new();
    for var in schema.variables() {
        if let ContextValue::Known(value) = snap.value(&var.name) {
            fragments.push(table.fragment(&var.name, value)?);
        }
    }
    let mut text = table
        .preamble
        .replace("{z}", &snap.window_seconds.to_string())
        .replace("{u}", &table.persona);
    if let Some((last, init)) = fragments.split_last() {
        text.push_str(&table.join.lead);
        if init.is_empty() {
            text.push_str(last);
        } else {
            text.push_str(&init.join(&table.join.separator));
            text.push_str(&table.join.last_separator);
            text.push_str(last);
        }
    }
    text.push_str(&table.join.terminator);
    Ok(text)
}
