#![allow(dead_code)]

use std::sync::Arc;

use contextgpt::context::Domain;
use contextgpt::data;
use contextgpt::describe::PhraseTable;
use contextgpt::gateway::{CacheStore, ContextRegistry, CountingBackend, MockBackend};
use contextgpt::pipeline::{Pipeline, WindowRecord};
use contextgpt::pool::{Pool, PoolStore};
use contextgpt::prompt::SystemMessageTemplate;
use contextgpt::rules::RuleSet;
use contextgpt::{ContextSnapshot, HashEmbedder};

pub fn domino() -> Domain {
    Domain::from_json(data::DOMINO_SCHEMA).unwrap()
}

pub fn domino_rules(domain: &Domain) -> RuleSet {
    RuleSet::from_json(data::DOMINO_RULES, domain).unwrap()
}

/// DOMINO pipeline over the rule-driven mock, with a handle counting the
/// calls that reach the backend.
pub fn counted_pipeline(cache: CacheStore) -> (Pipeline, Arc<CountingBackend<MockBackend>>) {
    let domain = domino();
    let table = PhraseTable::from_json(data::DOMINO_PHRASES, &domain.schema).unwrap();
    let template = SystemMessageTemplate::from_json(data::DOMINO_TEMPLATE).unwrap();
    let pool = Pool::from_jsonl(data::DOMINO_POOL, &domain, "domino").unwrap();
    let registry = ContextRegistry::new();
    let mock = MockBackend::new(
        domino_rules(&domain),
        domain.activities.clone(),
        registry.clone(),
    );
    let counting = Arc::new(CountingBackend::new(mock));
    let pipeline = Pipeline::new(
        domain,
        table,
        &template,
        PoolStore::in_memory(pool),
        Box::new(HashEmbedder::default()),
        Box::new(counting.clone()),
        registry,
    )
    .unwrap()
    .with_cache(cache);
    (pipeline, counting)
}

pub fn window(id: usize, user: &str, snap: &ContextSnapshot) -> WindowRecord {
    WindowRecord {
        window_id: format!("w{id:05}"),
        user: user.to_string(),
        start: None,
        z: snap.window_seconds,
        context: snap.assignments.clone(),
        label: None,
    }
}
