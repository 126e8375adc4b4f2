//! Output vocabulary for the decoder's reserved-word channel.
//!
//! Generated SQL tokens come from three sources: this reserved vocabulary,
//! the active database's schema item surfaces, and the previous turn's
//! query. The reserved list is fixed up front and extended with any
//! non-schema tokens seen in training gold queries so rarely-used keywords
//! (DESC, HAVING, ...) become emittable once observed.

use std::collections::BTreeSet;

use crate::data::tokenize::{EOS_TOKEN, VALUE_TOKEN};
use crate::data::{Corpus, Split};

/// Always-present reserved tokens, in vocabulary order.
const FIXED: &[&str] = &[
    "SELECT", "FROM", "WHERE", "GROUP", "ORDER", "BY", "LIMIT", "JOIN", "ON", "AS", "AND", "OR",
    "NOT", "IN", "LIKE", "BETWEEN", "count", "sum", "avg", "min", "max", "distinct", "=", "!=",
    "<>", "<", "<=", ">", ">=", "+", "-", "*", "/", "%", "(", ")", ",", VALUE_TOKEN, EOS_TOKEN,
];

/// Builds the reserved vocabulary: the fixed list, then (for a train corpus)
/// every gold-query token that is neither fixed nor a schema item surface of
/// its own database, in sorted order.
pub fn build_output_vocab(corpus: &Corpus) -> Vec<String> {
    let mut vocab: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    if corpus.split != Split::Train {
        return vocab;
    }
    let fixed: BTreeSet<&str> = FIXED.iter().copied().collect();
    let mut extras = BTreeSet::new();
    for interaction in &corpus.interactions {
        let schema = corpus.schema_of(interaction);
        let surfaces: BTreeSet<String> = schema.items.iter().map(|it| it.surface()).collect();
        for turn in &interaction.turns {
            for tok in &turn.gold_query_tokens {
                if !fixed.contains(tok.as_str()) && !surfaces.contains(tok) {
                    extras.insert(tok.clone());
                }
            }
        }
    }
    vocab.extend(extras);
    vocab
}

/// Gold tokens that no channel can produce: not reserved, not a schema item
/// of the turn's database, and absent from the previous turn's gold query.
/// Returned sorted and deduplicated as (db_id, token).
pub fn scan_coverage(corpus: &Corpus, vocab: &[String]) -> Vec<(String, String)> {
    let vocab: BTreeSet<&str> = vocab.iter().map(String::as_str).collect();
    let mut uncovered = BTreeSet::new();
    for interaction in &corpus.interactions {
        let schema = corpus.schema_of(interaction);
        let surfaces: BTreeSet<String> = schema.items.iter().map(|it| it.surface()).collect();
        let mut prev: BTreeSet<&str> = BTreeSet::new();
        for turn in &interaction.turns {
            for tok in &turn.gold_query_tokens {
                let ok = vocab.contains(tok.as_str())
                    || surfaces.contains(tok)
                    || prev.contains(tok.as_str());
                if !ok {
                    uncovered.insert((interaction.db_id.clone(), tok.clone()));
                }
            }
            prev = turn.gold_query_tokens.iter().map(String::as_str).collect();
        }
    }
    uncovered.into_iter().collect()
}
