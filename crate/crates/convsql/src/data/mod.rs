//! Corpora: schema and interaction loading, SQL tokenization, output
//! vocabularies, and a synthetic multi-turn generator for desk-scale runs.

pub mod interaction;
pub mod schema;
pub mod synthetic;
pub mod tokenize;
pub mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use interaction::{load_interactions, Interaction, Turn};
pub use schema::{load_schemas, DatabaseSchema, SchemaItem};
pub use synthetic::{generate_synthetic_corpus, GeneratorConfig, SyntheticCorpus};
pub use tokenize::{
    anonymize_values, detokenize, tokenize_query, tokenize_utterance, EOS_TOKEN, VALUE_TOKEN,
};
pub use vocab::{build_output_vocab, scan_coverage};

/// Which split a corpus belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// A set of interactions together with every schema they may reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schemas: BTreeMap<String, DatabaseSchema>,
    pub interactions: Vec<Interaction>,
    pub split: Split,
}

impl Corpus {
    pub fn schema_of(&self, interaction: &Interaction) -> &DatabaseSchema {
        self.schemas
            .get(&interaction.db_id)
            .unwrap_or_else(|| panic!("interaction references unloaded db `{}`", interaction.db_id))
    }
}
