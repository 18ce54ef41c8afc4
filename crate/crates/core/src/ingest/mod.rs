//! Prompt corpora, trigger injection and ontology trees.

mod corpus;
mod ontology;

pub use corpus::{
    inject_triggers, load_corpus, save_corpus, sha256_hex, CorpusFormat, CorpusSource, Placement, Prompt, PromptCorpus,
};
pub use ontology::{load_ontology, parse_ontology, OntologyNode};
