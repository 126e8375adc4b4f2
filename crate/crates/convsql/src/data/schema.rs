//! Database schemas: the item list the encoder and decoder operate over.
//!
//! The on-disk format mirrors the common `tables.json` layout: one global
//! `*` column at index 0, then all real columns tagged with their table
//! index. Loading redistributes the star so every table owns exactly one
//! `*` item, placed before that table's columns.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tokenize::split_words;
use crate::error::{Error, Result};

/// One encodable schema item: a column, or a table's `*` pseudo-column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaItem {
    pub table_index: usize,
    pub table_name: String,
    /// Column name, or `"*"` for the table's star item.
    pub column_name: String,
    /// Word tokens fed to the item encoder: table words, ".", column words.
    pub tokens: Vec<String>,
}

impl SchemaItem {
    fn new(table_index: usize, table_name: &str, column_name: &str) -> Self {
        let mut tokens = split_words(table_name);
        tokens.push(".".to_string());
        tokens.extend(split_words(column_name));
        SchemaItem {
            table_index,
            table_name: table_name.to_string(),
            column_name: column_name.to_string(),
            tokens,
        }
    }

    pub fn is_star(&self) -> bool {
        self.column_name == "*"
    }

    /// Output token this item contributes to generated SQL: `table.column`
    /// for real columns, the bare table name for the star item (which is how
    /// tables are referenced in FROM and JOIN clauses).
    pub fn surface(&self) -> String {
        if self.is_star() {
            self.table_name.clone()
        } else {
            format!("{}.{}", self.table_name, self.column_name)
        }
    }
}

/// A database schema with its relations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<String>,
    pub items: Vec<SchemaItem>,
    /// Item indices of primary key columns.
    pub primary_keys: BTreeSet<usize>,
    /// Ordered (foreign item, primary item) pairs.
    pub foreign_keys: BTreeSet<(usize, usize)>,
}

impl DatabaseSchema {
    /// Index of a table's star item.
    pub fn star_of(&self, table_index: usize) -> usize {
        self.items
            .iter()
            .position(|it| it.table_index == table_index && it.is_star())
            .expect("every table has a star item")
    }

    /// Finds an item by table and column name (`"*"` for the star).
    pub fn item_index(&self, table: &str, column: &str) -> Option<usize> {
        self.items
            .iter()
            .position(|it| it.table_name == table && it.column_name == column)
    }

    /// Item index whose surface form is `token`, if any.
    pub fn item_by_surface(&self, token: &str) -> Option<usize> {
        self.items.iter().position(|it| it.surface() == token)
    }
}

/// One database in the JSON schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDatabase {
    pub db_id: String,
    pub table_names_original: Vec<String>,
    /// `[table_index, column_name]` pairs; entry 0 is the global `*`.
    pub column_names_original: Vec<(i64, String)>,
    /// Indices into `column_names_original`.
    pub primary_keys: Vec<usize>,
    /// `[foreign, primary]` index pairs into `column_names_original`.
    pub foreign_keys: Vec<(usize, usize)>,
}

/// Loads a schema file into validated [`DatabaseSchema`]s keyed by db_id.
pub fn load_schemas(path: impl AsRef<Path>) -> Result<BTreeMap<String, DatabaseSchema>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<RawDatabase> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    schemas_from_raw(&raw)
}

/// Validates and converts raw databases. Exposed so generated corpora can be
/// materialized without touching disk.
pub fn schemas_from_raw(raw: &[RawDatabase]) -> Result<BTreeMap<String, DatabaseSchema>> {
    let mut out = BTreeMap::new();
    for db in raw {
        let schema = convert_db(db)?;
        if out.insert(schema.db_id.clone(), schema).is_some() {
            return Err(Error::SchemaValidation {
                db_id: db.db_id.clone(),
                message: "duplicate db_id in schema file".into(),
            });
        }
    }
    Ok(out)
}

fn convert_db(raw: &RawDatabase) -> Result<DatabaseSchema> {
    let fail = |message: String| Error::SchemaValidation {
        db_id: raw.db_id.clone(),
        message,
    };
    if raw.table_names_original.is_empty() {
        return Err(fail("schema has no tables".into()));
    }
    let tables: Vec<String> = raw
        .table_names_original
        .iter()
        .map(|t| t.to_ascii_lowercase())
        .collect();
    {
        let mut seen = BTreeSet::new();
        for t in &tables {
            if !seen.insert(t) {
                return Err(fail(format!("duplicate table name `{t}`")));
            }
        }
    }
    match raw.column_names_original.first() {
        Some((_, name)) if name == "*" => {}
        _ => return Err(fail("column 0 must be the global `*`".into())),
    }

    // Columns per table, keeping file order; raw index retained for remapping.
    let mut per_table: Vec<Vec<(usize, String)>> = vec![Vec::new(); tables.len()];
    for (raw_idx, (t_idx, name)) in raw.column_names_original.iter().enumerate().skip(1) {
        if name == "*" {
            return Err(fail(format!("column {raw_idx} duplicates the global `*`")));
        }
        let t = usize::try_from(*t_idx)
            .ok()
            .filter(|&t| t < tables.len())
            .ok_or_else(|| fail(format!("column `{name}` references unknown table {t_idx}")))?;
        let lname = name.to_ascii_lowercase();
        if per_table[t].iter().any(|(_, n)| *n == lname) {
            return Err(fail(format!(
                "duplicate column `{lname}` in table `{}`",
                tables[t]
            )));
        }
        per_table[t].push((raw_idx, lname));
    }

    // Item order: tables in order, star first, then that table's columns.
    let mut items = Vec::new();
    let mut raw_to_item: BTreeMap<usize, usize> = BTreeMap::new();
    for (t, table) in tables.iter().enumerate() {
        items.push(SchemaItem::new(t, table, "*"));
        for (raw_idx, col) in &per_table[t] {
            raw_to_item.insert(*raw_idx, items.len());
            items.push(SchemaItem::new(t, table, col));
        }
    }

    let resolve = |raw_idx: usize, role: &str| {
        raw_to_item.get(&raw_idx).copied().ok_or_else(|| {
            fail(format!("{role} references unknown column index {raw_idx}"))
        })
    };
    let mut primary_keys = BTreeSet::new();
    for &pk in &raw.primary_keys {
        primary_keys.insert(resolve(pk, "primary key")?);
    }
    let mut foreign_keys = BTreeSet::new();
    for &(f, p) in &raw.foreign_keys {
        let (fi, pi) = (resolve(f, "foreign key")?, resolve(p, "foreign key")?);
        if items[fi].table_index == items[pi].table_index {
            return Err(fail(format!(
                "foreign key {} -> {} stays inside one table",
                items[fi].surface(),
                items[pi].surface()
            )));
        }
        foreign_keys.insert((fi, pi));
    }

    Ok(DatabaseSchema {
        db_id: raw.db_id.clone(),
        tables,
        items,
        primary_keys,
        foreign_keys,
    })
}

/// Inverse of loading, for writing generated schemas in the file format.
pub fn schema_to_raw(schema: &DatabaseSchema) -> RawDatabase {
    let mut columns = vec![(-1i64, "*".to_string())];
    let mut item_to_raw: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, item) in schema.items.iter().enumerate() {
        if !item.is_star() {
            item_to_raw.insert(i, columns.len());
            columns.push((item.table_index as i64, item.column_name.clone()));
        }
    }
    RawDatabase {
        db_id: schema.db_id.clone(),
        table_names_original: schema.tables.clone(),
        column_names_original: columns,
        primary_keys: schema.primary_keys.iter().map(|i| item_to_raw[i]).collect(),
        foreign_keys: schema
            .foreign_keys
            .iter()
            .map(|(f, p)| (item_to_raw[f], item_to_raw[p]))
            .collect(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// The two-table example schema used across encoder and graph tests.
    pub(crate) fn dogs_owners_raw() -> RawDatabase {
        RawDatabase {
            db_id: "dogs_db".into(),
            table_names_original: vec!["Dogs".into(), "Owners".into()],
            column_names_original: vec![
                (-1, "*".into()),
                (0, "dog_id".into()),
                (0, "name".into()),
                (0, "owner_id".into()),
                (1, "owner_id".into()),
                (1, "first_name".into()),
            ],
            primary_keys: vec![1, 4],
            foreign_keys: vec![(3, 4)],
        }
    }

    #[test]
    fn dogs_owners_items_and_keys() {
        let schema = convert_db(&dogs_owners_raw()).unwrap();
        assert_eq!(schema.tables, ["dogs", "owners"]);
        let surfaces: Vec<String> = schema.items.iter().map(|it| it.surface()).collect();
        assert_eq!(
            surfaces,
            [
                "dogs",
                "dogs.dog_id",
                "dogs.name",
                "dogs.owner_id",
                "owners",
                "owners.owner_id",
                "owners.first_name"
            ]
        );
        // One star per table, each table's star before its columns.
        assert_eq!(schema.items.iter().filter(|it| it.is_star()).count(), 2);
        let fk: Vec<_> = schema.foreign_keys.iter().copied().collect();
        assert_eq!(fk, [(3, 5)]);
        assert!(schema.primary_keys.contains(&1) && schema.primary_keys.contains(&5));
        assert_eq!(
            schema.items[3].tokens,
            ["dogs", ".", "owner", "id"]
        );
    }

    #[test]
    fn single_table_single_column() {
        let raw = RawDatabase {
            db_id: "tiny".into(),
            table_names_original: vec!["t".into()],
            column_names_original: vec![(-1, "*".into()), (0, "c".into())],
            primary_keys: vec![],
            foreign_keys: vec![],
        };
        let schema = convert_db(&raw).unwrap();
        assert_eq!(schema.items.len(), 2);
        assert!(schema.foreign_keys.is_empty());
        assert_eq!(schema.items[0].surface(), "t");
        assert_eq!(schema.items[1].surface(), "t.c");
    }

    #[test]
    fn foreign_key_to_unknown_column_names_the_db() {
        let mut raw = dogs_owners_raw();
        raw.foreign_keys = vec![(3, 99)];
        let err = convert_db(&raw).unwrap_err();
        assert!(matches!(err, Error::SchemaValidation { ref db_id, .. } if db_id == "dogs_db"));
    }

    #[test]
    fn same_table_foreign_key_rejected() {
        let mut raw = dogs_owners_raw();
        raw.foreign_keys = vec![(1, 2)];
        assert!(convert_db(&raw).is_err());
    }

    #[test]
    fn raw_round_trip_preserves_structure() {
        let schema = convert_db(&dogs_owners_raw()).unwrap();
        let again = convert_db(&schema_to_raw(&schema)).unwrap();
        assert_eq!(schema, again);
    }
}
