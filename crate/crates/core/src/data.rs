//! Bundled dataset descriptions: schema, phrase table, system-message
//! template, example pool and surrogate rule set for a DOMINO-style and an
//! ExtraSensory-style vocabulary.
//!
//! The rule files are hand-written exclusion rules used as a knowledge
//! baseline and as the mock backend's oracle. They are not reconstructions
//! of any published ontology.

pub const DOMINO_SCHEMA: &str = include_str!("../data/domino/schema.json");
pub const DOMINO_PHRASES: &str = include_str!("../data/domino/phrases.json");
pub const DOMINO_TEMPLATE: &str = include_str!("../data/domino/template.json");
pub const DOMINO_POOL: &str = include_str!("../data/domino/pool.jsonl");
pub const DOMINO_RULES: &str = include_str!("../data/domino/rules.json");

pub const EXTRASENSORY_SCHEMA: &str = include_str!("../data/extrasensory/schema.json");
pub const EXTRASENSORY_PHRASES: &str = include_str!("../data/extrasensory/phrases.json");
pub const EXTRASENSORY_TEMPLATE: &str = include_str!("../data/extrasensory/template.json");
pub const EXTRASENSORY_POOL: &str = include_str!("../data/extrasensory/pool.jsonl");
pub const EXTRASENSORY_RULES: &str = include_str!("../data/extrasensory/rules.json");

/// Directory holding the bundled dataset files, for tools that take paths.
pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}
