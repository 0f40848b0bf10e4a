//! Activities, context vocabulary, context windows and consistency vectors.
//!
//! Everything here is immutable once constructed and shared by the rest of
//! the pipeline.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Literal used in snapshots and phrase tables for a variable with no value.
pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("activity set is empty")]
    NoActivities,
    #[error("duplicate activity name `{0}`")]
    DuplicateActivity(String),
    #[error("duplicate context variable `{0}`")]
    DuplicateVariable(String),
    #[error("categorical variable `{0}` needs at least two allowed values")]
    TooFewValues(String),
    #[error("window length must be positive")]
    ZeroWindow,
    #[error("name `{0}` contains a reserved character (`;`, `=` or `|`)")]
    ReservedCharacter(String),
    #[error("vector length {actual} does not match {expected} activities")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(ValidationReport),
    #[error("malformed canonical key `{0}`")]
    MalformedKey(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing schema: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Ordered, case-insensitively unique list of activity names.
///
/// The order fixed here is the bit order of every [`ConsistencyVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ActivitySet {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

impl ActivitySet {
    pub fn new<I, S>(names: I) -> Result<Self, ContextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names
            .into_iter()
            .map(|n| n.into().trim().to_string())
            .collect();
        if names.is_empty() {
            return Err(ContextError::NoActivities);
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(normalize_name(name), i).is_some() {
                return Err(ContextError::DuplicateActivity(name.clone()));
            }
        }
        Ok(Self { names, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Position of `name`, matched case-insensitively after trimming.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(&normalize_name(name)).copied()
    }

    /// Canonical spelling of `name` if it belongs to the set.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.position(name).map(|i| self.names[i].as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }
}

impl<'de> Deserialize<'de> for ActivitySet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(deserializer)?;
        ActivitySet::new(names).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Categorical,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VariableKind,
    /// Allowed values. Boolean variables may leave this empty and get
    /// `true`/`false`.
    #[serde(default)]
    pub values: Vec<String>,
}

impl Variable {
    pub fn allows(&self, value: &str) -> bool {
        self.values.iter().any(|v| v == value)
    }
}

/// The context variables a dataset exposes, plus the default window length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContextSchema {
    variables: Vec<Variable>,
    window_seconds: u32,
}

fn check_reserved(name: &str) -> Result<(), ContextError> {
    if name.contains([';', '=', '|']) {
        return Err(ContextError::ReservedCharacter(name.to_string()));
    }
    Ok(())
}

impl ContextSchema {
    pub fn new(variables: Vec<Variable>, window_seconds: u32) -> Result<Self, ContextError> {
        if window_seconds == 0 {
            return Err(ContextError::ZeroWindow);
        }
        let mut seen = std::collections::HashSet::new();
        let mut variables = variables;
        for var in &mut variables {
            check_reserved(&var.name)?;
            if !seen.insert(var.name.clone()) {
                return Err(ContextError::DuplicateVariable(var.name.clone()));
            }
            if var.kind == VariableKind::Boolean && var.values.is_empty() {
                var.values = vec!["true".into(), "false".into()];
            }
            let mut distinct = std::collections::HashSet::new();
            for value in &var.values {
                check_reserved(value)?;
                distinct.insert(value.as_str());
            }
            if distinct.len() < 2 {
                return Err(ContextError::TooFewValues(var.name.clone()));
            }
        }
        Ok(Self {
            variables,
            window_seconds,
        })
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn window_seconds(&self) -> u32 {
        self.window_seconds
    }

    /// Number of fully assigned contexts (no unknowns) the schema admits.
    pub fn context_count(&self) -> usize {
        self.variables.iter().map(|v| v.values.len()).product()
    }

    /// Enumerates fully assigned snapshots in lexicographic order (first
    /// variable slowest), stopping after `limit`.
    pub fn enumerate(&self, window_seconds: u32, limit: usize) -> Vec<ContextSnapshot> {
        let total = self.context_count().min(limit);
        let mut out = Vec::with_capacity(total);
        let mut digits = vec![0usize; self.variables.len()];
        for _ in 0..total {
            let assignments = self
                .variables
                .iter()
                .zip(&digits)
                .map(|(var, &d)| (var.name.clone(), ContextValue::Known(var.values[d].clone())))
                .collect();
            out.push(ContextSnapshot {
                user: None,
                window_seconds,
                assignments,
            });
            for (pos, var) in self.variables.iter().enumerate().rev() {
                digits[pos] += 1;
                if digits[pos] < var.values.len() {
                    break;
                }
                digits[pos] = 0;
            }
        }
        out
    }
}

/// A value assigned to one context variable in a window.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContextValue {
    Known(String),
    Unknown,
}

impl ContextValue {
    pub fn as_known(&self) -> Option<&str> {
        match self {
            ContextValue::Known(v) => Some(v),
            ContextValue::Unknown => None,
        }
    }
}

impl From<&str> for ContextValue {
    fn from(value: &str) -> Self {
        if value == UNKNOWN {
            ContextValue::Unknown
        } else {
            ContextValue::Known(value.to_string())
        }
    }
}

impl Serialize for ContextValue {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ContextValue::Known(v) => serializer.serialize_str(v),
            ContextValue::Unknown => serializer.serialize_str(UNKNOWN),
        }
    }
}

impl<'de> Deserialize<'de> for ContextValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Flag(bool),
            Number(serde_json::Number),
            Null(()),
        }
        Ok(match Raw::deserialize(deserializer)? {
            Raw::Text(s) => ContextValue::from(s.as_str()),
            Raw::Flag(b) => ContextValue::Known(b.to_string()),
            Raw::Number(n) => ContextValue::Known(n.to_string()),
            Raw::Null(()) => ContextValue::Unknown,
        })
    }
}

/// The context conditions that held for one user during one window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(rename = "z")]
    pub window_seconds: u32,
    #[serde(rename = "context")]
    pub assignments: BTreeMap<String, ContextValue>,
}

impl ContextSnapshot {
    pub fn new<I, K, V>(window_seconds: u32, assignments: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<ContextValue>,
    {
        Self {
            user: None,
            window_seconds,
            assignments: assignments
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }

    pub fn with_user(mut self, user: impl Into<String>) -> Self {
        self.user = Some(user.into());
        self
    }

    /// Value of `variable`; absent variables read as unknown.
    pub fn value(&self, variable: &str) -> &ContextValue {
        self.assignments
            .get(variable)
            .unwrap_or(&ContextValue::Unknown)
    }

    /// Cache identity of the window: assignments and `z`, never the user.
    ///
    /// Unknown and absent variables are equivalent and both left out.
    pub fn canonical_key(&self) -> String {
        let mut key = format!("z={}", self.window_seconds);
        for (name, value) in &self.assignments {
            if let ContextValue::Known(v) = value {
                key.push(';');
                key.push_str(name);
                key.push('=');
                key.push_str(v);
            }
        }
        key
    }

    /// Validates the snapshot and returns its canonical key.
    pub fn checked_key(&self, schema: &ContextSchema) -> Result<String, ContextError> {
        let report = validate_snapshot(schema, self);
        if !report.is_ok() {
            return Err(ContextError::InvalidSnapshot(report));
        }
        Ok(self.canonical_key())
    }

    /// Inverse of [`canonical_key`](Self::canonical_key).
    pub fn from_canonical_key(key: &str) -> Result<Self, ContextError> {
        let malformed = || ContextError::MalformedKey(key.to_string());
        let mut parts = key.split(';');
        let window_seconds = parts
            .next()
            .and_then(|p| p.strip_prefix("z="))
            .and_then(|z| z.parse().ok())
            .ok_or_else(malformed)?;
        let mut assignments = BTreeMap::new();
        for part in parts {
            let (name, value) = part.split_once('=').ok_or_else(malformed)?;
            assignments.insert(name.to_string(), ContextValue::Known(value.to_string()));
        }
        Ok(Self {
            user: None,
            window_seconds,
            assignments,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UnknownVariable { variable: String },
    ValueNotAllowed { variable: String, value: String },
    ZeroWindow,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownVariable { variable } => write!(f, "unknown variable `{variable}`"),
            Violation::ValueNotAllowed { variable, value } => {
                write!(f, "value not allowed: `{value}` for `{variable}`")
            }
            Violation::ZeroWindow => f.write_str("window length must be positive"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_snapshot(schema: &ContextSchema, snap: &ContextSnapshot) -> ValidationReport {
    let mut violations = Vec::new();
    if snap.window_seconds == 0 {
        violations.push(Violation::ZeroWindow);
    }
    for (name, value) in &snap.assignments {
        match schema.variable(name) {
            None => violations.push(Violation::UnknownVariable {
                variable: name.clone(),
            }),
            Some(var) => {
                if let ContextValue::Known(v) = value {
                    if !var.allows(v) {
                        violations.push(Violation::ValueNotAllowed {
                            variable: name.clone(),
                            value: v.clone(),
                        });
                    }
                }
            }
        }
    }
    ValidationReport { violations }
}

/// One bit per activity, in [`ActivitySet`] order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConsistencyVector(Vec<u8>);

impl ConsistencyVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1; len])
    }

    pub fn from_bits(acts: &ActivitySet, bits: Vec<u8>) -> Result<Self, ContextError> {
        if bits.len() != acts.len() {
            return Err(ContextError::LengthMismatch {
                expected: acts.len(),
                actual: bits.len(),
            });
        }
        Ok(Self(bits.into_iter().map(|b| u8::from(b != 0)).collect()))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.0.get(i) == Some(&1)
    }
}

/// Sets bit `i` for every activity named in `names`. Names that match no
/// activity come back as the second element.
pub fn vector_from_names<S: AsRef<str>>(
    acts: &ActivitySet,
    names: &[S],
) -> (ConsistencyVector, Vec<String>) {
    let mut bits = vec![0u8; acts.len()];
    let mut unmatched = Vec::new();
    for name in names {
        match acts.position(name.as_ref()) {
            Some(i) => bits[i] = 1,
            None => unmatched.push(name.as_ref().trim().to_string()),
        }
    }
    (ConsistencyVector(bits), unmatched)
}

pub fn names_from_vector(
    acts: &ActivitySet,
    vector: &ConsistencyVector,
) -> Result<Vec<String>, ContextError> {
    if vector.len() != acts.len() {
        return Err(ContextError::LengthMismatch {
            expected: acts.len(),
            actual: vector.len(),
        });
    }
    Ok(acts
        .names()
        .iter()
        .zip(vector.bits())
        .filter(|(_, &b)| b == 1)
        .map(|(n, _)| n.clone())
        .collect())
}

/// Activities and context schema as stored together in a schema file.
#[derive(Debug, Clone)]
pub struct Domain {
    pub activities: ActivitySet,
    pub schema: ContextSchema,
}

#[derive(Deserialize)]
struct DomainFile {
    activities: ActivitySet,
    variables: Vec<Variable>,
    window_seconds: u32,
}

#[derive(Serialize)]
struct DomainFileRef<'a> {
    activities: &'a ActivitySet,
    variables: &'a [Variable],
    window_seconds: u32,
}

impl Domain {
    pub fn from_json(text: &str) -> Result<Self, ContextError> {
        let file: DomainFile = serde_json::from_str(text)?;
        Ok(Self {
            activities: file.activities,
            schema: ContextSchema::new(file.variables, file.window_seconds)?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContextError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ContextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(DomainFileRef {
            activities: &self.activities,
            variables: self.schema.variables(),
            window_seconds: self.schema.window_seconds(),
        })
        .expect("schema serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acts() -> ActivitySet {
        ActivitySet::new(["Walking", "Running", "Sitting"]).unwrap()
    }

    fn schema() -> ContextSchema {
        ContextSchema::new(
            vec![
                Variable {
                    name: "semantic-location".into(),
                    kind: VariableKind::Categorical,
                    values: vec!["Home".into(), "Museum".into(), "Gym".into()],
                },
                Variable {
                    name: "outdoor".into(),
                    kind: VariableKind::Boolean,
                    values: vec![],
                },
            ],
            4,
        )
        .unwrap()
    }

    #[test]
    fn activity_names_are_case_insensitively_unique() {
        assert!(matches!(
            ActivitySet::new(["Walking", " walking "]),
            Err(ContextError::DuplicateActivity(_))
        ));
        assert!(matches!(
            ActivitySet::new(Vec::<String>::new()),
            Err(ContextError::NoActivities)
        ));
    }

    #[test]
    fn schema_invariants() {
        let one_value = Variable {
            name: "x".into(),
            kind: VariableKind::Categorical,
            values: vec!["a".into()],
        };
        assert!(matches!(
            ContextSchema::new(vec![one_value], 4),
            Err(ContextError::TooFewValues(_))
        ));
        assert!(matches!(
            ContextSchema::new(vec![], 0),
            Err(ContextError::ZeroWindow)
        ));
        let dup = Variable {
            name: "b".into(),
            kind: VariableKind::Boolean,
            values: vec![],
        };
        assert!(matches!(
            ContextSchema::new(vec![dup.clone(), dup], 4),
            Err(ContextError::DuplicateVariable(_))
        ));
    }

    #[test]
    fn validate_accepts_legal_snapshot() {
        let snap = ContextSnapshot::new(4, [("semantic-location", "Gym"), ("outdoor", "false")]);
        assert!(validate_snapshot(&schema(), &snap).is_ok());
    }

    #[test]
    fn validate_rejects_illegal_value_and_unknown_variable() {
        let snap = ContextSnapshot::new(4, [("semantic-location", "Mars")]);
        let report = validate_snapshot(&schema(), &snap);
        assert_eq!(
            report.violations,
            vec![Violation::ValueNotAllowed {
                variable: "semantic-location".into(),
                value: "Mars".into()
            }]
        );
        assert!(report.to_string().contains("value not allowed"));

        let snap = ContextSnapshot::new(4, [("altitude", "high")]);
        let report = validate_snapshot(&schema(), &snap);
        assert!(report.to_string().contains("unknown variable"));
    }

    #[test]
    fn canonical_key_ignores_order_and_user() {
        let mut a = ContextSnapshot::new(4, Vec::<(String, ContextValue)>::new());
        a.assignments.insert("a".into(), "1".into());
        a.assignments.insert("b".into(), "2".into());
        let mut b = ContextSnapshot::new(4, Vec::<(String, ContextValue)>::new()).with_user("u7");
        b.assignments.insert("b".into(), "2".into());
        b.assignments.insert("a".into(), "1".into());
        assert_eq!(a.canonical_key(), b.canonical_key());

        let c = ContextSnapshot::new(4, [("a", "1"), ("b", "3")]);
        assert_ne!(a.canonical_key(), c.canonical_key());
        let d = ContextSnapshot::new(5, [("a", "1"), ("b", "2")]);
        assert_ne!(a.canonical_key(), d.canonical_key());
    }

    #[test]
    fn unknown_and_absent_share_a_key() {
        let a = ContextSnapshot::new(4, [("a", "1"), ("b", UNKNOWN)]);
        let b = ContextSnapshot::new(4, [("a", "1")]);
        assert_eq!(a.canonical_key(), b.canonical_key());
        let parsed = ContextSnapshot::from_canonical_key(&a.canonical_key()).unwrap();
        assert_eq!(parsed, b);
    }

    #[test]
    fn checked_key_rejects_invalid() {
        let snap = ContextSnapshot::new(4, [("semantic-location", "Mars")]);
        assert!(matches!(
            snap.checked_key(&schema()),
            Err(ContextError::InvalidSnapshot(_))
        ));
    }

    #[test]
    fn vector_from_names_examples() {
        let acts = acts();
        let (v, diag) = vector_from_names(&acts, &["running"]);
        assert_eq!(v.bits(), &[0, 1, 0]);
        assert!(diag.is_empty());

        let (v, _) = vector_from_names::<&str>(&acts, &[]);
        assert_eq!(v.bits(), &[0, 0, 0]);

        let (v, diag) = vector_from_names(&acts, &["Running", " Flying "]);
        assert_eq!(v.bits(), &[0, 1, 0]);
        assert_eq!(diag, vec!["Flying".to_string()]);
    }

    #[test]
    fn names_from_vector_examples() {
        let acts = acts();
        let v = ConsistencyVector::from_bits(&acts, vec![0, 1, 0]).unwrap();
        assert_eq!(names_from_vector(&acts, &v).unwrap(), vec!["Running"]);
        assert_eq!(
            names_from_vector(&acts, &ConsistencyVector::ones(3)).unwrap(),
            acts.names()
        );
        assert!(matches!(
            names_from_vector(&acts, &ConsistencyVector::ones(2)),
            Err(ContextError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn round_trip_every_subset_of_eight() {
        let acts = ActivitySet::new((0..8).map(|i| format!("Activity {i}"))).unwrap();
        for mask in 0u32..256 {
            let subset: Vec<String> = acts
                .names()
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, n)| n.to_uppercase())
                .collect();
            let (v, diag) = vector_from_names(&acts, &subset);
            assert!(diag.is_empty());
            assert_eq!(v.len(), 8);
            let back = names_from_vector(&acts, &v).unwrap();
            let expected: Vec<String> = acts
                .names()
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, n)| n.clone())
                .collect();
            assert_eq!(back, expected);
        }
    }

    #[test]
    fn enumerate_is_lexicographic_and_bounded() {
        let s = schema();
        assert_eq!(s.context_count(), 6);
        let all = s.enumerate(4, usize::MAX);
        assert_eq!(all.len(), 6);
        assert_eq!(
            all[0].value("semantic-location"),
            &ContextValue::Known("Home".into())
        );
        assert_eq!(
            all[1].value("outdoor"),
            &ContextValue::Known("false".into())
        );
        let keys: std::collections::HashSet<_> = all.iter().map(|s| s.canonical_key()).collect();
        assert_eq!(keys.len(), 6);
        assert_eq!(s.enumerate(4, 4).len(), 4);
    }

    #[test]
    fn snapshot_json_accepts_bools_and_null() {
        let snap: ContextSnapshot =
            serde_json::from_str(r#"{"z":4,"context":{"outdoor":true,"semantic-location":null}}"#)
                .unwrap();
        assert_eq!(snap.value("outdoor"), &ContextValue::Known("true".into()));
        assert_eq!(snap.value("semantic-location"), &ContextValue::Unknown);
    }
}
