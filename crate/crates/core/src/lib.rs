//! Context-driven activity consistency from a language model.
//!
//! Each window of context data is rendered as a short natural-language
//! description, similar labelled examples are retrieved from a pool, and a
//! chat model is asked which activities fit the context. The answer is
//! parsed into a binary consistency vector over the activity set.

pub mod context;
pub mod data;
pub mod describe;
pub mod embed;
pub mod extract;
pub mod gateway;
pub mod pipeline;
pub mod pool;
pub mod prompt;
pub mod rules;

pub use context::{
    ActivitySet, ConsistencyVector, ContextSchema, ContextSnapshot, ContextValue, Domain,
};
pub use describe::{PhraseTable, Renderer};
pub use embed::{Embedder, HashEmbedder};
pub use extract::{extract, ExtractionPolicy, VectorRecord};
pub use gateway::{Backend, CacheStore, MockBackend};
pub use pipeline::{Pipeline, RunConfig, WindowRecord};
pub use pool::{Example, Pool, PoolStore};
pub use prompt::{Prompt, SystemMessageTemplate};
pub use rules::RuleSet;
