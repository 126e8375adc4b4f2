//! Multi-turn interactions: utterances paired with anonymized gold queries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::schema::DatabaseSchema;
use crate::data::tokenize::{anonymize_values, is_reserved, tokenize_query, tokenize_utterance};
use crate::error::{Error, Result};

/// One question and its target query, both tokenized, values anonymized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub utterance_tokens: Vec<String>,
    pub gold_query_tokens: Vec<String>,
}

/// An ordered conversation against one database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub db_id: String,
    pub turns: Vec<Turn>,
}

/// One turn in the JSON interaction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTurn {
    pub utterance: String,
    pub query: String,
}

/// One interaction in the JSON interaction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub database_id: String,
    pub interaction: Vec<RawTurn>,
}

/// Loads and validates an interaction file against already-loaded schemas.
pub fn load_interactions(
    path: impl AsRef<Path>,
    schemas: &BTreeMap<String, DatabaseSchema>,
) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<RawInteraction> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    interactions_from_raw(&raw, schemas)
}

/// Conversion and validation behind [`load_interactions`], reusable for
/// in-memory corpora.
pub fn interactions_from_raw(
    raw: &[RawInteraction],
    schemas: &BTreeMap<String, DatabaseSchema>,
) -> Result<Vec<Interaction>> {
    raw.iter()
        .enumerate()
        .map(|(i, r)| convert_interaction(i, r, schemas))
        .collect()
}

fn convert_interaction(
    index: usize,
    raw: &RawInteraction,
    schemas: &BTreeMap<String, DatabaseSchema>,
) -> Result<Interaction> {
    if !schemas.contains_key(&raw.database_id) {
        return Err(Error::InteractionValidation(format!(
            "interaction {index} references unknown db `{}`",
            raw.database_id
        )));
    }
    if raw.interaction.is_empty() {
        return Err(Error::InteractionValidation(format!(
            "interaction {index} ({}) has no turns",
            raw.database_id
        )));
    }
    let mut turns = Vec::with_capacity(raw.interaction.len());
    for (t, raw_turn) in raw.interaction.iter().enumerate() {
        let utterance_tokens = tokenize_utterance(&raw_turn.utterance);
        if utterance_tokens.is_empty() {
            return Err(Error::InteractionValidation(format!(
                "interaction {index} turn {t}: empty utterance"
            )));
        }
        let gold_query_tokens = anonymize_values(&tokenize_query(&raw_turn.query)?);
        if !is_reserved(&gold_query_tokens[0]) {
            return Err(Error::InteractionValidation(format!(
                "interaction {index} turn {t}: gold query starts with `{}`, not a reserved word",
                gold_query_tokens[0]
            )));
        }
        turns.push(Turn {
            utterance_tokens,
            gold_query_tokens,
        });
    }
    Ok(Interaction {
        db_id: raw.database_id.clone(),
        turns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::{schemas_from_raw, tests::dogs_owners_raw};

    fn schemas() -> BTreeMap<String, DatabaseSchema> {
        schemas_from_raw(&[dogs_owners_raw()]).unwrap()
    }

    fn raw(db: &str, turns: &[(&str, &str)]) -> RawInteraction {
        RawInteraction {
            database_id: db.into(),
            interaction: turns
                .iter()
                .map(|(u, q)| RawTurn {
                    utterance: u.to_string(),
                    query: q.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn four_turns_stay_in_order() {
        let r = raw(
            "dogs_db",
            &[
                ("How many dogs are there", "SELECT count ( * ) FROM Dogs"),
                ("what are their names", "SELECT dogs.name FROM dogs"),
                ("just the first one", "SELECT dogs.name FROM dogs LIMIT 1"),
                ("how about owners", "SELECT count ( * ) FROM owners"),
            ],
        );
        let loaded = interactions_from_raw(&[r], &schemas()).unwrap();
        assert_eq!(loaded[0].turns.len(), 4);
        assert_eq!(
            loaded[0].turns[0].utterance_tokens,
            ["how", "many", "dogs", "are", "there"]
        );
        assert_eq!(
            loaded[0].turns[3].gold_query_tokens,
            ["SELECT", "count", "(", "*", ")", "FROM", "owners"]
        );
    }

    #[test]
    fn single_turn_interaction() {
        let r = raw("dogs_db", &[("count the dogs", "SELECT count ( * ) FROM dogs")]);
        let loaded = interactions_from_raw(&[r], &schemas()).unwrap();
        assert_eq!(loaded[0].turns.len(), 1);
    }

    #[test]
    fn values_are_anonymized_at_load() {
        let r = raw(
            "dogs_db",
            &[(
                "who is Kacey",
                "SELECT dogs.name FROM dogs WHERE dogs.name = \"Kacey\"",
            )],
        );
        let loaded = interactions_from_raw(&[r], &schemas()).unwrap();
        assert_eq!(*loaded[0].turns[0].gold_query_tokens.last().unwrap(), "value");
    }

    #[test]
    fn unknown_db_rejected() {
        let r = raw("nope", &[("hi", "SELECT 1")]);
        assert!(matches!(
            interactions_from_raw(&[r], &schemas()),
            Err(Error::InteractionValidation(_))
        ));
    }

    #[test]
    fn empty_interaction_rejected() {
        let r = raw("dogs_db", &[]);
        assert!(interactions_from_raw(&[r], &schemas()).is_err());
    }
}
