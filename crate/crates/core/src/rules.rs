//! Exclusion rules standing in for an activity/context ontology, and the
//! inclusion metrics comparing LLM answers against them.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{names_from_vector, ActivitySet, ContextSnapshot, ContextValue, Domain};
use crate::extract::VectorRecord;

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("parsing rules: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("rule {rule}: unknown variable `{variable}`")]
    UnknownVariable { rule: usize, variable: String },
    #[error("rule {rule}: value `{value}` not allowed for `{variable}`")]
    UnknownValue {
        rule: usize,
        variable: String,
        value: String,
    },
    #[error("rule {rule}: unknown activity `{name}`")]
    UnknownActivity { rule: usize, name: String },
    #[error("rule {rule}: `{op}` expects {expected}")]
    Arity {
        rule: usize,
        op: &'static str,
        expected: &'static str,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Predicate {
    #[serde(rename = "equals")]
    Equals,
    #[serde(rename = "not-equals")]
    NotEquals,
    #[serde(rename = "in", alias = "in-set")]
    In,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    One(ContextValue),
    Many(Vec<ContextValue>),
}

impl Operand {
    fn values(&self) -> Vec<&ContextValue> {
        match self {
            Operand::One(v) => vec![v],
            Operand::Many(vs) => vs.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub var: String,
    pub op: Predicate,
    pub value: Operand,
}

impl Condition {
    /// Unknown values never satisfy any predicate.
    fn matches(&self, snap: &ContextSnapshot) -> bool {
        let ContextValue::Known(actual) = snap.value(&self.var) else {
            return false;
        };
        let hit = |v: &&ContextValue| v.as_known() == Some(actual.as_str());
        match self.op {
            Predicate::Equals | Predicate::In => self.value.values().iter().any(hit),
            Predicate::NotEquals => !self.value.values().iter().any(hit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub when: Vec<Condition>,
    pub exclude: Vec<String>,
}

impl Rule {
    pub fn matches(&self, snap: &ContextSnapshot) -> bool {
        self.when.iter().all(|c| c.matches(snap))
    }
}

/// Every activity is consistent unless a matching rule excludes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn from_json(text: &str, domain: &Domain) -> Result<Self, RulesError> {
        let rules: RuleSet = serde_json::from_str(text)?;
        rules.check(domain)?;
        Ok(rules)
    }

    pub fn load(path: impl AsRef<Path>, domain: &Domain) -> Result<Self, RulesError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RulesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, domain)
    }

    pub fn check(&self, domain: &Domain) -> Result<(), RulesError> {
        for (i, rule) in self.rules.iter().enumerate() {
            for cond in &rule.when {
                let var = domain.schema.variable(&cond.var).ok_or_else(|| {
                    RulesError::UnknownVariable {
                        rule: i,
                        variable: cond.var.clone(),
                    }
                })?;
                match (cond.op, &cond.value) {
                    (Predicate::Equals | Predicate::NotEquals, Operand::Many(_)) => {
                        return Err(RulesError::Arity {
                            rule: i,
                            op: "equals",
                            expected: "one value",
                        })
                    }
                    (Predicate::In, Operand::One(_)) => {
                        return Err(RulesError::Arity {
                            rule: i,
                            op: "in",
                            expected: "a list",
                        })
                    }
                    _ => {}
                }
                for value in cond.value.values() {
                    let allowed = value.as_known().is_some_and(|v| var.allows(v));
                    if !allowed {
                        return Err(RulesError::UnknownValue {
                            rule: i,
                            variable: cond.var.clone(),
                            value: value
                                .as_known()
                                .unwrap_or(crate::context::UNKNOWN)
                                .to_string(),
                        });
                    }
                }
            }
            for name in &rule.exclude {
                if !domain.activities.contains(name) {
                    return Err(RulesError::UnknownActivity {
                        rule: i,
                        name: name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// The consistent activities for `snap`, in activity-set order.
    pub fn evaluate(&self, acts: &ActivitySet, snap: &ContextSnapshot) -> Vec<String> {
        let excluded: HashSet<usize> = self
            .rules
            .iter()
            .filter(|r| r.matches(snap))
            .flat_map(|r| r.exclude.iter().filter_map(|n| acts.position(n)))
            .collect();
        acts.names()
            .iter()
            .enumerate()
            .filter(|(i, _)| !excluded.contains(i))
            .map(|(_, n)| n.clone())
            .collect()
    }
}

fn normalized(set: &[String]) -> HashSet<String> {
    set.iter().map(|s| s.trim().to_lowercase()).collect()
}

fn overlap(llm: &[String], rules: &[String]) -> (usize, usize, usize) {
    let l = normalized(llm);
    let o = normalized(rules);
    (l.intersection(&o).count(), l.len(), o.len())
}

/// |L ∩ O| / |L|: share of LLM-consistent activities the rules also accept.
/// `None` when L is empty.
pub fn l2o(llm: &[String], rules: &[String]) -> Option<f64> {
    let (both, l, _) = overlap(llm, rules);
    (l > 0).then(|| both as f64 / l as f64)
}

/// |L ∩ O| / |O|: share of rule-consistent activities the LLM also accepts.
/// `None` when O is empty.
pub fn o2l(llm: &[String], rules: &[String]) -> Option<f64> {
    let (both, _, o) = overlap(llm, rules);
    (o > 0).then(|| both as f64 / o as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionRow {
    pub canonical_key: String,
    pub k: f64,
    pub llm: Vec<String>,
    pub rules: Vec<String>,
    pub l2o: Option<f64>,
    pub o2l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub k: f64,
    pub contexts: usize,
    pub mean_l2o: Option<f64>,
    pub mean_o2l: Option<f64>,
    pub undefined_l2o: usize,
    pub undefined_o2l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub rows: Vec<InclusionRow>,
    pub by_k: Vec<ThresholdSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Compares LLM vectors against `rules`, one row per distinct
/// (canonical key, k). Records from several runs may be mixed.
pub fn compare_over_dataset(
    records: &[VectorRecord],
    rules: &RuleSet,
    domain: &Domain,
) -> Result<InclusionReport, RulesError> {
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for rec in records {
        if !seen.insert((rec.canonical_key.clone(), rec.k.to_bits())) {
            continue;
        }
        if rec.activities.as_slice() != domain.activities.names() {
            return Err(RulesError::SchemaMismatch(format!(
                "window {} was produced for a different activity set",
                rec.window_id
            )));
        }
        let snap = ContextSnapshot::from_canonical_key(&rec.canonical_key)
            .map_err(|e| RulesError::SchemaMismatch(e.to_string()))?;
        snap.checked_key(&domain.schema)
            .map_err(|e| RulesError::SchemaMismatch(e.to_string()))?;
        let llm = names_from_vector(&domain.activities, &rec.vector)
            .map_err(|e| RulesError::SchemaMismatch(e.to_string()))?;
        let expected = rules.evaluate(&domain.activities, &snap);
        rows.push(InclusionRow {
            canonical_key: rec.canonical_key.clone(),
            k: rec.k,
            l2o: l2o(&llm, &expected),
            o2l: o2l(&llm, &expected),
            llm,
            rules: expected,
        });
    }

    let mut groups: BTreeMap<u64, Vec<&InclusionRow>> = BTreeMap::new();
    for row in &rows {
        // k is non-negative, so bit order is numeric order
        groups.entry(row.k.to_bits()).or_default().push(row);
    }
    let by_k = groups
        .into_values()
        .map(|group| ThresholdSummary {
            k: group[0].k,
            contexts: group.len(),
            mean_l2o: mean(group.iter().filter_map(|r| r.l2o)),
            mean_o2l: mean(group.iter().filter_map(|r| r.o2l)),
            undefined_l2o: group.iter().filter(|r| r.l2o.is_none()).count(),
            undefined_o2l: group.iter().filter(|r| r.o2l.is_none()).count(),
        })
        .collect();
    Ok(InclusionReport { rows, by_k })
}

impl InclusionReport {
    /// Writes `canonical_key,k,l2o,o2l`; undefined metrics are left blank.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), RulesError> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["canonical_key", "k", "l2o", "o2l"])?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            writer.write_record([
                row.canonical_key.clone(),
                row.k.to_string(),
                cell(row.l2o),
                cell(row.o2l),
            ])?;
        }
        writer.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn aggregate_json(&self) -> serde_json::Value {
        serde_json::json!({ "contexts": self.rows.len(), "by_k": self.by_k })
    }
}
