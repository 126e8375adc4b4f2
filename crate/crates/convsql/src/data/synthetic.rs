//! Deterministic synthetic conversation generator.
//!
//! Each interaction opens by naming a topic table ("how many dogs are
//! there") and then asks follow-ups that never repeat the table name, so a
//! parser must carry the topic across turns to qualify columns correctly.
//! Follow-up turns only touch schema items adjacent (graph distance <= 1) to
//! items used in the previous gold query, which is exactly the locality the
//! cross-turn encoder is built to exploit.
//!
//! Dev databases pair tables already seen in training databases into
//! combinations no training database has, rewiring foreign keys for the new
//! pairing. This mirrors the cross-domain split of the real corpora: every
//! database is unseen as a whole, while its vocabulary transfers.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::interaction::{interactions_from_raw, RawInteraction, RawTurn};
use crate::data::schema::{schemas_from_raw, RawDatabase};
use crate::data::tokenize::split_words;
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};

pub const SCHEMA_FILE: &str = "schemas.json";
pub const TRAIN_FILE: &str = "train.json";
pub const DEV_FILE: &str = "dev.json";

const TABLE_POOL: &[&str] = &[
    "dogs", "owners", "cats", "birds", "ships", "planes", "trains", "cars", "trucks", "boats",
    "students", "teachers", "courses", "books", "authors", "stores", "orders", "clients",
    "agents", "houses", "rooms", "parks", "trees", "rivers", "lakes", "towns", "cities", "roads",
    "bridges", "farms",
];

const FIELD_POOL: &[&str] = &[
    "age", "weight", "height", "price", "color", "size", "rank", "score", "level", "width",
    "length", "speed", "power", "grade", "rating", "year", "budget", "salary", "distance",
    "area", "volume", "depth", "mass", "density", "charge", "energy", "force", "torque", "phase",
    "gain", "bias", "slope", "offset", "scale", "ratio", "period",
];

const VALUE_POOL: &[&str] = &[
    "kacey", "milo", "bella", "luna", "rocky", "daisy", "duke", "ruby", "jack", "lily", "oscar",
    "molly", "leo", "sadie", "toby", "chloe", "rex", "zoe", "bruno", "nala", "simba", "coco",
    "thor", "willow",
];

/// Generator knobs; all counts must be at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_databases: usize,
    pub tables_per_db: usize,
    pub columns_per_table: usize,
    pub n_interactions: usize,
    pub turns_per_interaction: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_databases: 10,
            tables_per_db: 2,
            columns_per_table: 4,
            n_interactions: 300,
            turns_per_interaction: 3,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_databases", self.n_databases),
            ("tables_per_db", self.tables_per_db),
            ("columns_per_table", self.columns_per_table),
            ("n_interactions", self.n_interactions),
            ("turns_per_interaction", self.turns_per_interaction),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// A generated corpus pair plus the raw records it serializes from.
pub struct SyntheticCorpus {
    pub raw_schemas: Vec<RawDatabase>,
    pub raw_train: Vec<RawInteraction>,
    pub raw_dev: Vec<RawInteraction>,
    pub train: Corpus,
    pub dev: Corpus,
}

impl SyntheticCorpus {
    /// Writes `schemas.json`, `train.json`, `dev.json` under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dump = |name: &str, json: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
        };
        dump(SCHEMA_FILE, pretty(&self.raw_schemas))?;
        dump(TRAIN_FILE, pretty(&self.raw_train))?;
        dump(DEV_FILE, pretty(&self.raw_dev))
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("raw corpus records always serialize")
}

#[derive(Clone)]
struct TablePlan {
    word: String,
    columns: Vec<String>,
    /// Column in this table referencing the previous table's `id`.
    fk_col: Option<String>,
}

struct DbPlan {
    db_id: String,
    tables: Vec<TablePlan>,
}

#[derive(Clone, Copy, PartialEq)]
enum Pattern {
    AttrOfValue,
    Superlative,
    CountAbove,
    Join,
}

/// Generates the train/dev corpus pair. Deterministic given the seed.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_dev = (cfg.n_databases / 5).max(1).min(cfg.n_databases);
    let n_train = cfg.n_databases - n_dev;

    let mut dbs: Vec<DbPlan> = Vec::with_capacity(cfg.n_databases);
    let mut train_plans: Vec<TablePlan> = Vec::new();
    let mut train_sets: Vec<BTreeSet<String>> = Vec::new();
    for k in 0..cfg.n_databases {
        let db = if k < n_train {
            build_db(&mut rng, k, cfg, &pool(TABLE_POOL), &pool(FIELD_POOL))
        } else {
            recombine_db(&mut rng, k, cfg, &train_plans, &train_sets)
        };
        if k < n_train {
            for t in &db.tables {
                train_plans.push(strip_fk(t));
            }
            train_sets.push(db.tables.iter().map(|t| t.word.clone()).collect());
        }
        dbs.push(db);
    }

    let mut raw_train = Vec::new();
    let mut raw_dev = Vec::new();
    for i in 0..cfg.n_interactions {
        let db_index = i % cfg.n_databases;
        let raw = gen_interaction(&mut rng, &dbs[db_index], cfg.turns_per_interaction);
        if db_index < n_train {
            raw_train.push(raw);
        } else {
            raw_dev.push(raw);
        }
    }

    let raw_schemas: Vec<RawDatabase> = dbs.iter().map(db_to_raw).collect();
    let schemas = schemas_from_raw(&raw_schemas)?;
    let train = Corpus {
        schemas: schemas.clone(),
        interactions: interactions_from_raw(&raw_train, &schemas)?,
        split: Split::Train,
    };
    let dev = Corpus {
        interactions: interactions_from_raw(&raw_dev, &schemas)?,
        schemas,
        split: Split::Dev,
    };
    Ok(SyntheticCorpus {
        raw_schemas,
        raw_train,
        raw_dev,
        train,
        dev,
    })
}

fn pool(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

/// Draws `n` distinct words not in `forbidden`; synthesizes `prefix{k}`
/// names once the pool runs dry.
fn sample_distinct(
    rng: &mut ChaCha8Rng,
    pool: &[String],
    n: usize,
    forbidden: &BTreeSet<String>,
    prefix: &str,
) -> Vec<String> {
    let mut candidates: Vec<&String> = pool.iter().filter(|w| !forbidden.contains(*w)).collect();
    candidates.shuffle(rng);
    let mut out: Vec<String> = candidates.into_iter().take(n).cloned().collect();
    let mut k = 0;
    while out.len() < n {
        let fresh = format!("{prefix}{k}");
        if !forbidden.contains(&fresh) && !out.contains(&fresh) {
            out.push(fresh);
        }
        k += 1;
    }
    out
}

fn build_db(
    rng: &mut ChaCha8Rng,
    index: usize,
    cfg: &GeneratorConfig,
    table_pool: &[String],
    field_pool: &[String],
) -> DbPlan {
    let table_words = sample_distinct(
        rng,
        table_pool,
        cfg.tables_per_db,
        &BTreeSet::new(),
        "table",
    );
    let mut tables = Vec::with_capacity(cfg.tables_per_db);
    for (j, word) in table_words.iter().enumerate() {
        let mut columns = vec!["id".to_string()];
        if cfg.columns_per_table >= 2 {
            columns.push("name".to_string());
        }
        let fk_col = (j > 0 && cfg.columns_per_table >= 3).then(|| {
            let fk = format!("{}_id", table_words[j - 1]);
            columns.push(fk.clone());
            fk
        });
        if columns.len() < cfg.columns_per_table {
            let forbidden: BTreeSet<String> = columns.iter().cloned().collect();
            let extra = sample_distinct(
                rng,
                field_pool,
                cfg.columns_per_table - columns.len(),
                &forbidden,
                "field",
            );
            columns.extend(extra);
        }
        tables.push(TablePlan {
            word: word.clone(),
            columns,
            fk_col,
        });
    }
    DbPlan {
        db_id: format!("syn_db_{index}"),
        tables,
    }
}

/// Copy of a train table with its pairing-specific key column removed.
fn strip_fk(t: &TablePlan) -> TablePlan {
    TablePlan {
        word: t.word.clone(),
        columns: t
            .columns
            .iter()
            .filter(|c| Some(*c) != t.fk_col.as_ref())
            .cloned()
            .collect(),
        fk_col: None,
    }
}

/// Builds a dev database by pairing train tables into a combination no
/// train database has, rewiring the key chain for the new order. Falls back
/// to recombining bare words when no unseen pairing comes up.
fn recombine_db(
    rng: &mut ChaCha8Rng,
    index: usize,
    cfg: &GeneratorConfig,
    train_plans: &[TablePlan],
    train_sets: &[BTreeSet<String>],
) -> DbPlan {
    for _ in 0..64 {
        let mut order: Vec<usize> = (0..train_plans.len()).collect();
        order.shuffle(rng);
        let mut chosen: Vec<&TablePlan> = Vec::with_capacity(cfg.tables_per_db);
        let mut words = BTreeSet::new();
        for &i in &order {
            if words.insert(train_plans[i].word.clone()) {
                chosen.push(&train_plans[i]);
                if chosen.len() == cfg.tables_per_db {
                    break;
                }
            }
        }
        if chosen.len() < cfg.tables_per_db || train_sets.contains(&words) {
            continue;
        }
        let field_pool: Vec<String> = train_fields(train_plans);
        let mut tables: Vec<TablePlan> = Vec::with_capacity(cfg.tables_per_db);
        for (j, plan) in chosen.into_iter().enumerate() {
            let mut t = plan.clone();
            if j > 0 && cfg.columns_per_table >= 3 {
                let fk = format!("{}_id", tables[j - 1].word);
                if !t.columns.contains(&fk) {
                    t.columns.insert(t.columns.len().min(2), fk.clone());
                    t.fk_col = Some(fk);
                }
            }
            // Hold every table to the configured width so dev tables are
            // shaped like train tables: drop trailing fields, or pad with
            // train field words the table never carried.
            while t.columns.len() > cfg.columns_per_table {
                let last = t.columns.len() - 1;
                debug_assert!(Some(&t.columns[last]) != t.fk_col.as_ref());
                t.columns.remove(last);
            }
            if t.columns.len() < cfg.columns_per_table {
                let forbidden: BTreeSet<String> = t.columns.iter().cloned().collect();
                let extra = sample_distinct(
                    rng,
                    &field_pool,
                    cfg.columns_per_table - t.columns.len(),
                    &forbidden,
                    "field",
                );
                t.columns.extend(extra);
            }
            tables.push(t);
        }
        return DbPlan {
            db_id: format!("syn_db_{index}"),
            tables,
        };
    }
    let words: BTreeSet<String> = train_plans.iter().map(|p| p.word.clone()).collect();
    let words: Vec<String> = words.into_iter().collect();
    build_db(rng, index, cfg, &words, &train_fields(train_plans))
}

/// Distinct non-key field words across the (stripped) train tables.
fn train_fields(plans: &[TablePlan]) -> Vec<String> {
    let mut out = BTreeSet::new();
    for p in plans {
        for c in &p.columns {
            if c != "id" && c != "name" && !c.ends_with("_id") {
                out.insert(c.clone());
            }
        }
    }
    out.into_iter().collect()
}

fn db_to_raw(db: &DbPlan) -> RawDatabase {
    let mut columns = vec![(-1i64, "*".to_string())];
    let mut primary_keys = Vec::new();
    let mut foreign_keys = Vec::new();
    let mut bases = Vec::new();
    for (j, t) in db.tables.iter().enumerate() {
        let base = columns.len();
        bases.push(base);
        primary_keys.push(base); // "id" is always the first column
        for c in &t.columns {
            columns.push((j as i64, c.clone()));
        }
        if let Some(fk) = &t.fk_col {
            let fk_pos = base + t.columns.iter().position(|c| c == fk).unwrap();
            foreign_keys.push((fk_pos, bases[j - 1]));
        }
    }
    RawDatabase {
        db_id: db.db_id.clone(),
        table_names_original: db.tables.iter().map(|t| t.word.clone()).collect(),
        column_names_original: columns,
        primary_keys,
        foreign_keys,
    }
}

/// Non-key columns usable as question subjects.
fn attr_cols(t: &TablePlan) -> Vec<&String> {
    t.columns
        .iter()
        .filter(|c| *c != "id" && Some(*c) != t.fk_col.as_ref())
        .collect()
}

/// Join partners of `t_idx`: (other table, true when the topic table holds
/// the foreign key).
fn neighbors(db: &DbPlan, t_idx: usize) -> Vec<(usize, bool)> {
    let mut out = Vec::new();
    if t_idx > 0 && db.tables[t_idx].fk_col.is_some() {
        out.push((t_idx - 1, true));
    }
    if t_idx + 1 < db.tables.len() && db.tables[t_idx + 1].fk_col.is_some() {
        out.push((t_idx + 1, false));
    }
    out
}

fn candidates(db: &DbPlan, t_idx: usize) -> Vec<Pattern> {
    let t = &db.tables[t_idx];
    let has_name = t.columns.iter().any(|c| c == "name");
    let mut out = Vec::new();
    if has_name {
        out.push(Pattern::AttrOfValue);
        out.push(Pattern::Superlative);
        out.push(Pattern::CountAbove);
    }
    if !neighbors(db, t_idx).is_empty() {
        out.push(Pattern::Join);
    }
    out
}

fn gen_interaction(rng: &mut ChaCha8Rng, db: &DbPlan, n_turns: usize) -> RawInteraction {
    let t_idx = rng.random_range(0..db.tables.len());
    let t = &db.tables[t_idx];
    let mut turns = Vec::with_capacity(n_turns);
    turns.push(RawTurn {
        utterance: format!("how many {} are there", t.word),
        query: format!("SELECT count ( * ) FROM {}", t.word),
    });
    let choices = candidates(db, t_idx);
    for _ in 1..n_turns {
        let turn = if choices.is_empty() {
            // Degenerate schemas (single keyless column) can only count.
            RawTurn {
                utterance: "how many are there".into(),
                query: format!("SELECT count ( * ) FROM {}", t.word),
            }
        } else {
            let pattern = choices[rng.random_range(0..choices.len())];
            render(rng, db, t_idx, pattern)
        };
        turns.push(turn);
    }
    RawInteraction {
        database_id: db.db_id.clone(),
        interaction: turns,
    }
}

fn render(rng: &mut ChaCha8Rng, db: &DbPlan, t_idx: usize, pattern: Pattern) -> RawTurn {
    let t = &db.tables[t_idx];
    let pick = |rng: &mut ChaCha8Rng, cols: &[&String]| cols[rng.random_range(0..cols.len())].clone();
    match pattern {
        Pattern::AttrOfValue => {
            let col = pick(rng, &attr_cols(t));
            let val = VALUE_POOL[rng.random_range(0..VALUE_POOL.len())];
            RawTurn {
                utterance: format!("what is the {} of {val}", words_of(&col)),
                query: format!(
                    "SELECT {t}.{col} FROM {t} WHERE {t}.name = \"{val}\"",
                    t = t.word
                ),
            }
        }
        Pattern::Superlative => {
            let col = pick(rng, &attr_cols(t));
            let (adj, dir) = if rng.random_bool(0.5) {
                ("highest", "DESC")
            } else {
                ("lowest", "ASC")
            };
            RawTurn {
                utterance: format!("which one has the {adj} {}", words_of(&col)),
                query: format!(
                    "SELECT {t}.name FROM {t} ORDER BY {t}.{col} {dir} LIMIT 1",
                    t = t.word
                ),
            }
        }
        Pattern::CountAbove => {
            let col = pick(rng, &attr_cols(t));
            let n = rng.random_range(1..=9);
            RawTurn {
                utterance: format!("how many have {} above {n}", words_of(&col)),
                query: format!(
                    "SELECT count ( * ) FROM {t} WHERE {t}.{col} > {n}",
                    t = t.word
                ),
            }
        }
        Pattern::Join => {
            let adj = neighbors(db, t_idx);
            let (o_idx, fk_on_topic) = adj[rng.random_range(0..adj.len())];
            let o = &db.tables[o_idx];
            let col = pick(rng, &attr_cols(o));
            let on = if fk_on_topic {
                format!("{t}.{fk} = {o}.id", t = t.word, fk = t.fk_col.as_ref().unwrap(), o = o.word)
            } else {
                format!("{o}.{fk} = {t}.id", o = o.word, fk = o.fk_col.as_ref().unwrap(), t = t.word)
            };
            RawTurn {
                utterance: format!("list the {} {}", o.word, words_of(&col)),
                query: format!(
                    "SELECT {o}.{col} FROM {t} JOIN {o} ON {on}",
                    o = o.word,
                    t = t.word
                ),
            }
        }
    }
}

fn words_of(ident: &str) -> String {
    split_words(ident).join(" ")
}
