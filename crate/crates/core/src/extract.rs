//! Turning raw LLM answers into consistency vectors.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{vector_from_names, ActivitySet, ConsistencyVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketChoice {
    /// The answer list follows the reasoning, which may contain brackets too.
    #[default]
    Last,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownNames {
    #[default]
    IgnoreWarn,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    AllConsistent,
    AllInconsistent,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractionPolicy {
    pub bracket: BracketChoice,
    pub unknown: UnknownNames,
    pub fallback: Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("unknown activity names: {}", .0.join(", "))]
    UnknownNames(Vec<String>),
    #[error("no usable activity list in response")]
    MissingList,
    #[error("activity list is empty")]
    EmptyList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    MissingList,
    EmptyList,
    UnknownName {
        name: String,
    },
    /// Set by the pipeline when the backend failed for this context.
    BackendFailure {
        message: String,
    },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::MissingList => f.write_str("missing list"),
            Diagnostic::EmptyList => f.write_str("empty list"),
            Diagnostic::UnknownName { name } => write!(f, "{name} unmatched"),
            Diagnostic::BackendFailure { message } => write!(f, "backend failure: {message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub vector: ConsistencyVector,
    /// True when the vector came from the fallback policy rather than the text.
    pub fallback: bool,
    pub diagnostics: Vec<Diagnostic>,
}

fn bracket_groups() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").expect("valid regex"))
}

/// Items of the selected bracketed group, or `None` when there is none.
pub fn bracketed_items(raw: &str, choice: BracketChoice) -> Option<Vec<String>> {
    let mut groups = bracket_groups().captures_iter(raw);
    let group = match choice {
        BracketChoice::First => groups.next(),
        BracketChoice::Last => groups.last(),
    }?;
    Some(
        group[1]
            .split(',')
            .map(|item| {
                item.trim()
                    .trim_matches(|c| matches!(c, '"' | '\'' | '*' | '`'))
                    .trim()
            })
            .filter(|item| !item.is_empty())
            .map(str::to_string)
            .collect(),
    )
}

fn fallback_vector(
    acts: &ActivitySet,
    policy: &ExtractionPolicy,
    reason: ExtractError,
    mut diagnostics: Vec<Diagnostic>,
) -> Result<Extraction, ExtractError> {
    let vector = match policy.fallback {
        Fallback::AllConsistent => ConsistencyVector::ones(acts.len()),
        Fallback::AllInconsistent => ConsistencyVector::zeros(acts.len()),
        Fallback::Fail => return Err(reason),
    };
    diagnostics.push(match reason {
        ExtractError::EmptyList => Diagnostic::EmptyList,
        _ => Diagnostic::MissingList,
    });
    Ok(Extraction {
        vector,
        fallback: true,
        diagnostics,
    })
}

pub fn extract(
    raw: &str,
    acts: &ActivitySet,
    policy: &ExtractionPolicy,
) -> Result<Extraction, ExtractError> {
    let Some(items) = bracketed_items(raw, policy.bracket) else {
        log::warn!("no bracketed list in response, applying fallback: {raw:?}");
        return fallback_vector(acts, policy, ExtractError::MissingList, Vec::new());
    };
    let (vector, unmatched) = vector_from_names(acts, &items);
    if !unmatched.is_empty() && policy.unknown == UnknownNames::Fail {
        return Err(ExtractError::UnknownNames(unmatched));
    }
    if !unmatched.is_empty() {
        log::warn!("ignoring unknown activity names {unmatched:?}");
    }
    let diagnostics: Vec<Diagnostic> = unmatched
        .into_iter()
        .map(|name| Diagnostic::UnknownName { name })
        .collect();
    if vector.count_ones() == 0 {
        log::warn!("no known activity in the list, applying fallback: {raw:?}");
        return fallback_vector(acts, policy, ExtractError::EmptyList, diagnostics);
    }
    Ok(Extraction {
        vector,
        fallback: false,
        diagnostics,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub responses: usize,
    pub fallbacks: usize,
    pub missing_lists: usize,
    pub empty_lists: usize,
    pub failures: usize,
    pub unknown_names: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchExtraction {
    pub results: Vec<Result<Extraction, ExtractError>>,
    pub summary: BatchSummary,
}

pub fn extract_batch<S: AsRef<str>>(
    responses: &[S],
    acts: &ActivitySet,
    policy: &ExtractionPolicy,
) -> BatchExtraction {
    let mut summary = BatchSummary {
        responses: responses.len(),
        ..Default::default()
    };
    let results: Vec<_> = responses
        .iter()
        .map(|r| extract(r.as_ref(), acts, policy))
        .collect();
    for result in &results {
        match result {
            Ok(ex) => {
                summary.fallbacks += usize::from(ex.fallback);
                for diag in &ex.diagnostics {
                    match diag {
                        Diagnostic::MissingList => summary.missing_lists += 1,
                        Diagnostic::EmptyList => summary.empty_lists += 1,
                        Diagnostic::UnknownName { name } => {
                            *summary.unknown_names.entry(name.clone()).or_default() += 1
                        }
                        Diagnostic::BackendFailure { .. } => {}
                    }
                }
            }
            Err(_) => summary.failures += 1,
        }
    }
    BatchExtraction { results, summary }
}

/// One line of an output vectors file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub window_id: String,
    pub canonical_key: String,
    pub k: f64,
    pub vector: ConsistencyVector,
    pub activities: Vec<String>,
    pub cache_hit: bool,
    pub fallback: bool,
    pub diagnostics: Vec<String>,
}
