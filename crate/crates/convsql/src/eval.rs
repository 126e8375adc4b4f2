//! Clause-level SQL comparison and the question/interaction metrics.
//!
//! Queries are decomposed into canonical clause sets so that two queries
//! stating the same constraints in different orders compare equal: WHERE
//! conjuncts, SELECT items, and join conditions are order-insensitive, while
//! ORDER BY remains an ordered list and directions and LIMIT compare
//! exactly. Aliases are resolved during parsing, so rewriting a query with
//! fresh alias names never affects equality. Literal values are the
//! anonymized placeholder, making matching value-insensitive.
//!
//! The supported shape is a single SELECT with optional JOINs, WHERE (AND/OR
//! of simple comparisons), GROUP BY/HAVING, ORDER BY/LIMIT, and one level of
//! INTERSECT/UNION/EXCEPT. Anything else is a parse error; evaluation counts
//! unparseable predictions as mismatches without crashing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::tokenize::{anonymize_values, is_literal, tokenize_query, VALUE_TOKEN};
use crate::data::{Corpus, DatabaseSchema};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Agg {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl Agg {
    fn parse(tok: &str) -> Option<Agg> {
        match tok {
            "count" => Some(Agg::Count),
            "sum" => Some(Agg::Sum),
            "avg" => Some(Agg::Avg),
            "min" => Some(Agg::Min),
            "max" => Some(Agg::Max),
            _ => None,
        }
    }
}

/// A possibly aggregated column reference, canonical after alias resolution.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct AggRef {
    pub agg: Option<Agg>,
    pub distinct: bool,
    /// `table.column`, `table.*`, or the bare `*`.
    pub col: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Operand {
    /// The anonymized literal placeholder.
    Value,
    Column(String),
    Subquery(Box<ClauseSet>),
}

/// One simple comparison. The operator keeps its canonical token spelling
/// except that `<>` normalizes to `!=`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Condition {
    pub lhs: AggRef,
    pub op: String,
    pub rhs: Operand,
}

/// WHERE tree: n-ary AND/OR with children sorted canonically, so a pure
/// conjunction compares as a set and mixed trees compare structurally but
/// order-insensitively at each level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum WhereExpr {
    Cond(Condition),
    And(Vec<WhereExpr>),
    Or(Vec<WhereExpr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Asc,
    Desc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SetOp {
    Union,
    Intersect,
    Except,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LimitCount {
    /// Anonymized limit (`LIMIT value`).
    Value,
    N(u64),
}

/// Canonical decomposition of one query. Equality is exact set match.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClauseSet {
    /// Sorted with duplicates kept: a multiset.
    pub select_items: Vec<AggRef>,
    pub from_tables: BTreeSet<String>,
    /// Unordered column pairs, each stored (min, max).
    pub join_conditions: BTreeSet<(String, String)>,
    pub where_expr: Option<WhereExpr>,
    pub group_by: BTreeSet<String>,
    pub having: BTreeSet<Condition>,
    pub order_by: Vec<(AggRef, Direction)>,
    pub limit: Option<LimitCount>,
    pub set_op: Option<(SetOp, Box<ClauseSet>)>,
}

/// True iff the two decompositions state the same constraints.
pub fn exact_set_match(a: &ClauseSet, b: &ClauseSet) -> bool {
    a == b
}

/// Parses a tokenized query (from `tokenize_query` + `anonymize_values`)
/// into its canonical clause decomposition.
pub fn parse_clauses(tokens: &[String], schema: &DatabaseSchema) -> Result<ClauseSet> {
    parse_block(tokens, 0, schema)
}

fn err(position: usize, message: impl Into<String>) -> Error {
    Error::SqlParse {
        position,
        message: message.into(),
    }
}

/// Splits at the first top-level set operator, parsing both sides.
fn parse_block(tokens: &[String], base: usize, schema: &DatabaseSchema) -> Result<ClauseSet> {
    let mut depth = 0usize;
    for (i, t) in tokens.iter().enumerate() {
        match t.as_str() {
            "(" => depth += 1,
            ")" => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| err(base + i, "unbalanced `)`"))?
            }
            "UNION" | "INTERSECT" | "EXCEPT" if depth == 0 => {
                let op = match t.as_str() {
                    "UNION" => SetOp::Union,
                    "INTERSECT" => SetOp::Intersect,
                    _ => SetOp::Except,
                };
                let mut left = Parser::new(&tokens[..i], base, schema)?.parse_select()?;
                let rest = &tokens[i + 1..];
                if rest.is_empty() {
                    return Err(err(base + i, format!("nothing after {t}")));
                }
                let right = parse_block(rest, base + i + 1, schema)?;
                left.set_op = Some((op, Box::new(right)));
                return Ok(left);
            }
            _ => {}
        }
    }
    Parser::new(tokens, base, schema)?.parse_select()
}

struct Parser<'a> {
    tokens: &'a [String],
    /// Offset of `tokens[0]` in the original query, for error positions.
    base: usize,
    pos: usize,
    schema: &'a DatabaseSchema,
    aliases: BTreeMap<String, String>,
    tables: Vec<String>,
}

impl<'a> Parser<'a> {
    /// Pre-scans the FROM segment so aliases resolve before SELECT items are
    /// interpreted.
    fn new(tokens: &'a [String], base: usize, schema: &'a DatabaseSchema) -> Result<Self> {
        let mut p = Parser {
            tokens,
            base,
            pos: 0,
            schema,
            aliases: BTreeMap::new(),
            tables: Vec::new(),
        };
        p.scan_from_segment()?;
        Ok(p)
    }

    fn at(&self) -> usize {
        self.base + self.pos
    }

    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self
            .tokens
            .get(self.pos)
            .ok_or_else(|| err(self.base + self.tokens.len(), "unexpected end of query"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let at = self.at();
        let got = self.next()?;
        if got != want {
            return Err(err(at, format!("expected `{want}`, found `{got}`")));
        }
        Ok(())
    }

    fn is_table(&self, name: &str) -> bool {
        self.schema.tables.iter().any(|t| t == name)
    }

    /// Records FROM/JOIN tables and `AS` bindings without consuming input.
    fn scan_from_segment(&mut self) -> Result<()> {
        let mut i = 0;
        let mut depth = 0usize;
        while i < self.tokens.len() {
            match self.tokens[i].as_str() {
                "(" => depth += 1,
                ")" => depth = depth.saturating_sub(1),
                "FROM" | "JOIN" if depth == 0 => {
                    let name = self
                        .tokens
                        .get(i + 1)
                        .ok_or_else(|| err(self.base + i + 1, "missing table name"))?;
                    if !self.is_table(name) {
                        return Err(err(self.base + i + 1, format!("unknown table `{name}`")));
                    }
                    self.tables.push(name.clone());
                    i += 2;
                    if self.tokens.get(i).map(String::as_str) == Some("AS") {
                        let alias = self
                            .tokens
                            .get(i + 1)
                            .ok_or_else(|| err(self.base + i + 1, "missing alias name"))?;
                        self.aliases.insert(alias.clone(), name.clone());
                        i += 2;
                    }
                    continue;
                }
                _ => {}
            }
            i += 1;
        }
        Ok(())
    }

    /// Canonical `table.column` form, `table.*`, or `*`. Bare columns
    /// resolve against the FROM tables; a lone `*` qualifies to the single
    /// FROM table when there is exactly one.
    fn resolve_column(&self, tok: &str, at: usize) -> Result<String> {
        if tok == "*" {
            return Ok(if self.tables.len() == 1 {
                format!("{}.*", self.tables[0])
            } else {
                "*".to_string()
            });
        }
        if let Some((qual, col)) = tok.split_once('.') {
            let table = self.aliases.get(qual).map(String::as_str).unwrap_or(qual);
            if !self.is_table(table) {
                return Err(err(at, format!("unknown table in `{tok}`")));
            }
            if col == "*" {
                return Ok(format!("{table}.*"));
            }
            if self.schema.item_index(table, col).is_none() {
                return Err(err(at, format!("unknown column `{table}.{col}`")));
            }
            return Ok(format!("{table}.{col}"));
        }
        let hits: Vec<&String> = self
            .tables
            .iter()
            .filter(|t| self.schema.item_index(t, tok).is_some())
            .collect();
        match hits.as_slice() {
            [t] => Ok(format!("{t}.{tok}")),
            [] => Err(err(at, format!("unresolvable column `{tok}`"))),
            _ => Err(err(at, format!("ambiguous column `{tok}`"))),
        }
    }

    /// `agg ( [distinct] col )`, `[distinct] col`, or `*`.
    fn parse_agg_ref(&mut self, distinct_all: bool) -> Result<AggRef> {
        let at = self.at();
        let tok = self.next()?;
        if let Some(agg) = Agg::parse(tok) {
            self.expect("(")?;
            let mut distinct = distinct_all;
            if self.peek() == Some("distinct") {
                self.next()?;
                distinct = true;
            }
            let col_at = self.at();
            let col_tok = self.next()?;
            let col = self.resolve_column(col_tok, col_at)?;
            self.expect(")")?;
            return Ok(AggRef {
                agg: Some(agg),
                distinct,
                col,
            });
        }
        let mut distinct = distinct_all;
        let mut tok = tok;
        let mut at = at;
        if tok == "distinct" {
            distinct = true;
            at = self.at();
            tok = self.next()?;
        }
        Ok(AggRef {
            agg: None,
            distinct,
            col: self.resolve_column(tok, at)?,
        })
    }

    fn parse_select(&mut self) -> Result<ClauseSet> {
        self.expect("SELECT")?;
        let mut distinct_all = false;
        if self.peek() == Some("distinct") {
            // Applies to the whole row; recorded per item.
            self.next()?;
            distinct_all = true;
        }
        let mut select_items = vec![self.parse_agg_ref(distinct_all)?];
        while self.peek() == Some(",") {
            self.next()?;
            select_items.push(self.parse_agg_ref(distinct_all)?);
        }
        select_items.sort();

        let mut set = ClauseSet {
            select_items,
            from_tables: BTreeSet::new(),
            join_conditions: BTreeSet::new(),
            where_expr: None,
            group_by: BTreeSet::new(),
            having: BTreeSet::new(),
            order_by: Vec::new(),
            limit: None,
            set_op: None,
        };

        self.expect("FROM")?;
        self.parse_table(&mut set)?;
        while self.peek() == Some("JOIN") {
            self.next()?;
            self.parse_table(&mut set)?;
            if self.peek() == Some("ON") {
                self.next()?;
                loop {
                    let cond = self.parse_condition()?;
                    match cond.rhs {
                        Operand::Column(rhs) => {
                            let lhs = cond.lhs.col;
                            let pair = if lhs <= rhs { (lhs, rhs) } else { (rhs, lhs) };
                            set.join_conditions.insert(pair);
                        }
                        _ => return Err(err(self.at(), "join condition must compare columns")),
                    }
                    if self.peek() == Some("AND") {
                        self.next()?;
                    } else {
                        break;
                    }
                }
            }
        }

        if self.peek() == Some("WHERE") {
            self.next()?;
            set.where_expr = Some(self.parse_where_expr()?);
        }
        if self.peek() == Some("GROUP") {
            self.next()?;
            self.expect("BY")?;
            loop {
                let at = self.at();
                let tok = self.next()?;
                set.group_by.insert(self.resolve_column(tok, at)?);
                if self.peek() == Some(",") {
                    self.next()?;
                } else {
                    break;
                }
            }
        }
        if self.peek() == Some("HAVING") {
            self.next()?;
            loop {
                set.having.insert(self.parse_condition()?);
                if self.peek() == Some("AND") {
                    self.next()?;
                } else {
                    break;
                }
            }
        }
        if self.peek() == Some("ORDER") {
            self.next()?;
            self.expect("BY")?;
            loop {
                let item = self.parse_agg_ref(false)?;
                let dir = match self.peek() {
                    Some("ASC") => {
                        self.next()?;
                        Direction::Asc
                    }
                    Some("DESC") => {
                        self.next()?;
                        Direction::Desc
                    }
                    _ => Direction::Asc,
                };
                set.order_by.push((item, dir));
                if self.peek() == Some(",") {
                    self.next()?;
                } else {
                    break;
                }
            }
        }
        if self.peek() == Some("LIMIT") {
            self.next()?;
            let at = self.at();
            let tok = self.next()?;
            set.limit = Some(if tok == VALUE_TOKEN {
                LimitCount::Value
            } else {
                LimitCount::N(
                    tok.parse()
                        .map_err(|_| err(at, format!("bad limit `{tok}`")))?,
                )
            });
        }
        if let Some(t) = self.peek() {
            return Err(err(self.at(), format!("unexpected token `{t}`")));
        }
        Ok(set)
    }

    fn parse_table(&mut self, set: &mut ClauseSet) -> Result<()> {
        let at = self.at();
        let name = self.next()?;
        if !self.is_table(name) {
            return Err(err(at, format!("unknown table `{name}`")));
        }
        set.from_tables.insert(name.to_string());
        if self.peek() == Some("AS") {
            self.next()?;
            self.next()?; // alias already recorded by the pre-scan
        }
        Ok(())
    }

    /// AND binds tighter than OR; both levels flatten and sort.
    fn parse_where_expr(&mut self) -> Result<WhereExpr> {
        let mut or_children = vec![self.parse_conjunction()?];
        while self.peek() == Some("OR") {
            self.next()?;
            or_children.push(self.parse_conjunction()?);
        }
        Ok(normalize(or_children, false))
    }

    fn parse_conjunction(&mut self) -> Result<WhereExpr> {
        let mut children = vec![WhereExpr::Cond(self.parse_condition()?)];
        while self.peek() == Some("AND") {
            self.next()?;
            children.push(WhereExpr::Cond(self.parse_condition()?));
        }
        Ok(normalize(children, true))
    }

    fn parse_condition(&mut self) -> Result<Condition> {
        let lhs = self.parse_agg_ref(false)?;
        let at = self.at();
        let mut op = self.next()?.to_string();
        if op == "NOT" {
            let follow = self.next()?;
            if follow != "IN" && follow != "LIKE" && follow != "BETWEEN" {
                return Err(err(at, format!("unsupported operator `NOT {follow}`")));
            }
            op = format!("NOT {follow}");
        }
        if op == "<>" {
            op = "!=".to_string();
        }
        let base_op = op.strip_prefix("NOT ").unwrap_or(&op);
        match base_op {
            "=" | "!=" | "<" | "<=" | ">" | ">=" | "LIKE" => {
                let rhs = self.parse_operand()?;
                Ok(Condition { lhs, op, rhs })
            }
            "BETWEEN" => {
                // Both bounds are anonymized; the pair collapses to Value.
                self.parse_operand()?;
                self.expect("AND")?;
                self.parse_operand()?;
                Ok(Condition {
                    lhs,
                    op,
                    rhs: Operand::Value,
                })
            }
            "IN" => {
                self.expect("(")?;
                let start = self.pos;
                let mut depth = 1usize;
                while depth > 0 {
                    let at = self.at();
                    match self.next() {
                        Ok("(") => depth += 1,
                        Ok(")") => depth -= 1,
                        Ok(_) => {}
                        Err(_) => return Err(err(at, "unterminated IN (")),
                    }
                }
                let inner = &self.tokens[start..self.pos - 1];
                if inner.first().map(String::as_str) == Some("SELECT") {
                    let sub = parse_block(inner, self.base + start, self.schema)?;
                    Ok(Condition {
                        lhs,
                        op,
                        rhs: Operand::Subquery(Box::new(sub)),
                    })
                } else {
                    // Value list; anonymization makes the contents a single
                    // placeholder regardless of arity.
                    Ok(Condition {
                        lhs,
                        op,
                        rhs: Operand::Value,
                    })
                }
            }
            other => Err(err(at, format!("unsupported operator `{other}`"))),
        }
    }

    fn parse_operand(&mut self) -> Result<Operand> {
        let at = self.at();
        if self.peek() == Some("(") {
            self.next()?;
            let start = self.pos;
            let mut depth = 1usize;
            while depth > 0 {
                let at = self.at();
                match self.next() {
                    Ok("(") => depth += 1,
                    Ok(")") => depth -= 1,
                    Ok(_) => {}
                    Err(_) => return Err(err(at, "unterminated subquery")),
                }
            }
            let inner = &self.tokens[start..self.pos - 1];
            let sub = parse_block(inner, self.base + start, self.schema)?;
            return Ok(Operand::Subquery(Box::new(sub)));
        }
        let tok = self.next()?;
        if tok == VALUE_TOKEN || is_literal(tok) {
            return Ok(Operand::Value);
        }
        Ok(Operand::Column(self.resolve_column(tok, at)?))
    }
}

/// Flattens same-operator children and sorts them; single children collapse.
fn normalize(mut children: Vec<WhereExpr>, conjunction: bool) -> WhereExpr {
    if children.len() == 1 {
        return children.pop().unwrap();
    }
    let mut flat = Vec::new();
    for c in children {
        match (conjunction, c) {
            (true, WhereExpr::And(inner)) => flat.extend(inner),
            (false, WhereExpr::Or(inner)) => flat.extend(inner),
            (_, other) => flat.push(other),
        }
    }
    flat.sort();
    if conjunction {
        WhereExpr::And(flat)
    } else {
        WhereExpr::Or(flat)
    }
}

/// One scored prediction row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub interaction_index: usize,
    pub db_id: String,
    /// 0-based position within the interaction.
    pub turn_index: usize,
    pub predicted_query: String,
    pub gold_query: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TurnBucket {
    pub label: String,
    pub total: usize,
    pub matched: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub question_match: f64,
    pub interaction_match: f64,
    pub per_turn: Vec<TurnBucket>,
    pub questions_total: usize,
    pub questions_matched: usize,
    pub interactions_total: usize,
    pub interactions_matched: usize,
    /// Predictions outside the supported grammar, counted as mismatches.
    pub unparseable: usize,
}

impl EvalReport {
    /// Aligned plain-text table of all metrics.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>9}\n",
            "metric", "matched", "total", "fraction"
        ));
        s.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>9.4}\n",
            "question match", self.questions_matched, self.questions_total, self.question_match
        ));
        s.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>9.4}\n",
            "interaction match",
            self.interactions_matched,
            self.interactions_total,
            self.interaction_match
        ));
        for b in &self.per_turn {
            s.push_str(&format!(
                "{:<18} {:>8} {:>8} {:>9.4}\n",
                format!("turn {}", b.label),
                b.matched,
                b.total,
                b.fraction
            ));
        }
        s.push_str(&format!("{:<18} {:>8}\n", "unparseable", self.unparseable));
        s
    }
}

const BUCKETS: [&str; 5] = ["1", "2", "3", "4", ">4"];

fn bucket_of(turn_number: usize) -> usize {
    if turn_number > 4 {
        4
    } else {
        turn_number - 1
    }
}

/// Scores predictions against the corpus gold. Requires exactly one
/// prediction per (interaction, turn); reports question match, interaction
/// match, and per-turn-position buckets.
pub fn evaluate(predictions: &[Prediction], corpus: &Corpus) -> Result<EvalReport> {
    let mut by_key: BTreeMap<(usize, usize), &Prediction> = BTreeMap::new();
    for p in predictions {
        if by_key.insert((p.interaction_index, p.turn_index), p).is_some() {
            return Err(Error::Evaluation(format!(
                "duplicate prediction for interaction {} turn {}",
                p.interaction_index, p.turn_index
            )));
        }
    }
    let mut missing = Vec::new();
    for (i, inter) in corpus.interactions.iter().enumerate() {
        for t in 0..inter.turns.len() {
            if !by_key.contains_key(&(i, t)) {
                missing.push(format!("({i}, {t})"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "missing predictions for (interaction, turn): {}",
            missing.join(", ")
        )));
    }
    let expected: usize = corpus.interactions.iter().map(|i| i.turns.len()).sum();
    if by_key.len() != expected {
        return Err(Error::Evaluation(format!(
            "{} predictions do not correspond to any corpus turn",
            by_key.len() - expected
        )));
    }

    let mut questions_total = 0;
    let mut questions_matched = 0;
    let mut interactions_matched = 0;
    let mut unparseable = 0;
    let mut bucket_total = [0usize; 5];
    let mut bucket_matched = [0usize; 5];

    for (i, inter) in corpus.interactions.iter().enumerate() {
        let schema = corpus.schema_of(inter);
        let mut all = true;
        for (t, turn) in inter.turns.iter().enumerate() {
            let p = by_key[&(i, t)];
            if p.db_id != inter.db_id {
                return Err(Error::Evaluation(format!(
                    "prediction for interaction {i} names db `{}`, corpus has `{}`",
                    p.db_id, inter.db_id
                )));
            }
            let gold = parse_clauses(&turn.gold_query_tokens, schema).map_err(|e| {
                Error::Evaluation(format!(
                    "gold query of interaction {i} turn {t} does not parse: {e}"
                ))
            })?;
            let matched = match tokenize_query(&p.predicted_query)
                .map(|toks| anonymize_values(&toks))
                .and_then(|toks| parse_clauses(&toks, schema))
            {
                Ok(pred) => exact_set_match(&pred, &gold),
                Err(_) => {
                    unparseable += 1;
                    false
                }
            };
            questions_total += 1;
            let b = bucket_of(t + 1);
            bucket_total[b] += 1;
            if matched {
                questions_matched += 1;
                bucket_matched[b] += 1;
            } else {
                all = false;
            }
        }
        if all {
            interactions_matched += 1;
        }
    }

    let frac = |m: usize, t: usize| if t == 0 { 0.0 } else { m as f64 / t as f64 };
    Ok(EvalReport {
        question_match: frac(questions_matched, questions_total),
        interaction_match: frac(interactions_matched, corpus.interactions.len()),
        per_turn: BUCKETS
            .iter()
            .enumerate()
            .map(|(b, label)| TurnBucket {
                label: label.to_string(),
                total: bucket_total[b],
                matched: bucket_matched[b],
                fraction: frac(bucket_matched[b], bucket_total[b]),
            })
            .collect(),
        questions_total,
        questions_matched,
        interactions_total: corpus.interactions.len(),
        interactions_matched,
        unparseable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::interaction::{interactions_from_raw, RawInteraction, RawTurn};
    use crate::data::schema::{schemas_from_raw, tests::dogs_owners_raw};
    use crate::data::Split;

    fn schema() -> DatabaseSchema {
        schemas_from_raw(&[dogs_owners_raw()])
            .unwrap()
            .remove("dogs_db")
            .unwrap()
    }

    fn parse(sql: &str, schema: &DatabaseSchema) -> Result<ClauseSet> {
        let toks = anonymize_values(&tokenize_query(sql).unwrap());
        parse_clauses(&toks, schema)
    }

    #[test]
    fn count_star_qualifies_to_the_single_from_table() {
        let s = schema();
        let c = parse("SELECT count ( * ) FROM Dogs", &s).unwrap();
        assert_eq!(
            c.select_items,
            vec![AggRef {
                agg: Some(Agg::Count),
                distinct: false,
                col: "dogs.*".into()
            }]
        );
        assert!(c.from_tables.contains("dogs"));
        assert!(c.where_expr.is_none() && c.limit.is_none());
    }

    #[test]
    fn parsing_is_deterministic() {
        let s = schema();
        let a = parse("SELECT dogs.name FROM dogs", &s).unwrap();
        let b = parse("SELECT dogs.name FROM dogs", &s).unwrap();
        assert_eq!(a, b);
        assert!(exact_set_match(&a, &b));
    }

    #[test]
    fn aliases_resolve_and_never_affect_equality() {
        let s = schema();
        let aliased = parse(
            "SELECT T1.first_name FROM owners AS T1 JOIN Dogs AS T2 \
             ON T1.owner_id = T2.owner_id WHERE T2.dog_id > 1",
            &s,
        )
        .unwrap();
        let plain = parse(
            "SELECT owners.first_name FROM owners JOIN dogs \
             ON owners.owner_id = dogs.owner_id WHERE dogs.dog_id > 1",
            &s,
        )
        .unwrap();
        assert_eq!(aliased, plain);
        assert!(aliased
            .join_conditions
            .contains(&("dogs.owner_id".into(), "owners.owner_id".into())));
    }

    #[test]
    fn where_conjunct_order_is_irrelevant() {
        let s = schema();
        let a = parse(
            "SELECT dogs.name FROM dogs WHERE dogs.dog_id = 1 AND dogs.name = 'x'",
            &s,
        )
        .unwrap();
        let b = parse(
            "SELECT dogs.name FROM dogs WHERE dogs.name = 'y' AND dogs.dog_id = 2",
            &s,
        )
        .unwrap();
        assert!(exact_set_match(&a, &b), "values and order are ignored");
    }

    #[test]
    fn select_item_order_is_irrelevant_but_content_counts() {
        let s = schema();
        let a = parse("SELECT dogs.name , dogs.dog_id FROM dogs", &s).unwrap();
        let b = parse("SELECT dogs.dog_id , dogs.name FROM dogs", &s).unwrap();
        let c = parse("SELECT dogs.dog_id , dogs.owner_id FROM dogs", &s).unwrap();
        assert!(exact_set_match(&a, &b));
        assert!(!exact_set_match(&a, &c));
    }

    #[test]
    fn order_by_direction_and_sequence_are_meaningful() {
        let s = schema();
        let asc = parse("SELECT dogs.name FROM dogs ORDER BY dogs.dog_id", &s).unwrap();
        let asc2 = parse("SELECT dogs.name FROM dogs ORDER BY dogs.dog_id ASC", &s).unwrap();
        let desc = parse("SELECT dogs.name FROM dogs ORDER BY dogs.dog_id DESC", &s).unwrap();
        assert!(exact_set_match(&asc, &asc2), "ASC is the default");
        assert!(!exact_set_match(&asc, &desc));
        let ab = parse(
            "SELECT dogs.name FROM dogs ORDER BY dogs.dog_id , dogs.name",
            &s,
        )
        .unwrap();
        let ba = parse(
            "SELECT dogs.name FROM dogs ORDER BY dogs.name , dogs.dog_id",
            &s,
        )
        .unwrap();
        assert!(!exact_set_match(&ab, &ba), "ORDER BY is an ordered list");
    }

    #[test]
    fn group_having_limit_and_set_ops_parse() {
        let s = schema();
        let c = parse(
            "SELECT dogs.name FROM dogs GROUP BY dogs.name \
             HAVING count ( * ) > 2 ORDER BY count ( * ) DESC LIMIT 1",
            &s,
        )
        .unwrap();
        assert!(c.group_by.contains("dogs.name"));
        assert_eq!(c.having.len(), 1);
        assert_eq!(c.limit, Some(LimitCount::Value));

        let u = parse(
            "SELECT dogs.name FROM dogs UNION SELECT owners.first_name FROM owners",
            &s,
        )
        .unwrap();
        let (op, sub) = u.set_op.as_ref().unwrap();
        assert_eq!(*op, SetOp::Union);
        assert!(sub.from_tables.contains("owners"));
    }

    #[test]
    fn unequal_spellings_of_not_equal_agree() {
        let s = schema();
        let a = parse("SELECT dogs.name FROM dogs WHERE dogs.dog_id != 1", &s).unwrap();
        let b = parse("SELECT dogs.name FROM dogs WHERE dogs.dog_id <> 1", &s).unwrap();
        assert!(exact_set_match(&a, &b));
    }

    #[test]
    fn mixed_and_or_trees_compare_structurally() {
        let s = schema();
        let a = parse(
            "SELECT dogs.name FROM dogs WHERE dogs.dog_id = 1 OR dogs.dog_id = 2 AND dogs.name = 'x'",
            &s,
        )
        .unwrap();
        let b = parse(
            "SELECT dogs.name FROM dogs WHERE dogs.name = 'x' AND dogs.dog_id = 2 OR dogs.dog_id = 1",
            &s,
        )
        .unwrap();
        // Same tree up to commutativity at each level.
        assert!(exact_set_match(&a, &b));
        let c = parse(
            "SELECT dogs.name FROM dogs WHERE dogs.dog_id = 1 AND dogs.dog_id = 2 OR dogs.name = 'x'",
            &s,
        )
        .unwrap();
        assert!(!exact_set_match(&a, &c), "different grouping differs");
    }

    #[test]
    fn parse_errors_carry_positions_and_do_not_crash_evaluation() {
        let s = schema();
        let bad = parse("SELECT FROM dogs", &s);
        assert!(matches!(bad, Err(Error::SqlParse { .. })));
        let unknown = parse("SELECT cats.name FROM cats", &s);
        assert!(unknown.is_err());
    }

    fn corpus(rows: &[(&str, Vec<(&str, &str)>)]) -> Corpus {
        let schemas = schemas_from_raw(&[dogs_owners_raw()]).unwrap();
        let raw: Vec<RawInteraction> = rows
            .iter()
            .map(|(db, turns)| RawInteraction {
                database_id: db.to_string(),
                interaction: turns
                    .iter()
                    .map(|(u, q)| RawTurn {
                        utterance: u.to_string(),
                        query: q.to_string(),
                    })
                    .collect(),
            })
            .collect();
        let interactions = interactions_from_raw(&raw, &schemas).unwrap();
        Corpus {
            schemas,
            interactions,
            split: Split::Dev,
        }
    }

    fn prediction(i: usize, t: usize, sql: &str) -> Prediction {
        Prediction {
            interaction_index: i,
            db_id: "dogs_db".into(),
            turn_index: t,
            predicted_query: sql.into(),
            gold_query: String::new(),
        }
    }

    #[test]
    fn half_matched_interaction_counts_once_for_questions_never_for_interactions() {
        let c = corpus(&[(
            "dogs_db",
            vec![
                ("count dogs", "SELECT count ( * ) FROM dogs"),
                ("their names", "SELECT dogs.name FROM dogs"),
            ],
        )]);
        let preds = vec![
            prediction(0, 0, "SELECT count ( * ) FROM dogs"),
            prediction(0, 1, "SELECT dogs.dog_id FROM dogs"),
        ];
        let r = evaluate(&preds, &c).unwrap();
        assert_eq!(r.question_match, 0.5);
        assert_eq!(r.interaction_match, 0.0);
        assert_eq!(r.per_turn[0].matched, 1);
        assert_eq!(r.per_turn[1].matched, 0);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let c = corpus(&[
            (
                "dogs_db",
                vec![
                    ("count dogs", "SELECT count ( * ) FROM dogs"),
                    ("names", "SELECT dogs.name FROM dogs"),
                ],
            ),
            ("dogs_db", vec![("owners", "SELECT count ( * ) FROM owners")]),
        ]);
        let preds = vec![
            prediction(0, 0, "SELECT count ( * ) FROM dogs"),
            prediction(0, 1, "SELECT dogs.name FROM dogs"),
            prediction(1, 0, "SELECT count ( * ) FROM owners"),
        ];
        let r = evaluate(&preds, &c).unwrap();
        assert_eq!(r.question_match, 1.0);
        assert_eq!(r.interaction_match, 1.0);
        assert_eq!(r.unparseable, 0);
    }

    #[test]
    fn unparseable_predictions_are_tallied_mismatches() {
        let c = corpus(&[("dogs_db", vec![("count", "SELECT count ( * ) FROM dogs")])]);
        let preds = vec![prediction(0, 0, "FROM FROM FROM")];
        let r = evaluate(&preds, &c).unwrap();
        assert_eq!(r.question_match, 0.0);
        assert_eq!(r.unparseable, 1);
    }

    #[test]
    fn missing_and_duplicate_predictions_are_validation_errors() {
        let c = corpus(&[(
            "dogs_db",
            vec![
                ("count", "SELECT count ( * ) FROM dogs"),
                ("names", "SELECT dogs.name FROM dogs"),
            ],
        )]);
        let err = evaluate(&[prediction(0, 0, "SELECT count ( * ) FROM dogs")], &c);
        match err {
            Err(Error::Evaluation(msg)) => assert!(msg.contains("(0, 1)")),
            other => panic!("expected missing-key error, got {other:?}"),
        }
        let dup = evaluate(
            &[
                prediction(0, 0, "SELECT count ( * ) FROM dogs"),
                prediction(0, 0, "SELECT count ( * ) FROM dogs"),
                prediction(0, 1, "SELECT dogs.name FROM dogs"),
            ],
            &c,
        );
        assert!(dup.is_err());
    }

    #[test]
    fn single_turn_corpus_equates_question_and_interaction_match() {
        let c = corpus(&[
            ("dogs_db", vec![("count", "SELECT count ( * ) FROM dogs")]),
            ("dogs_db", vec![("names", "SELECT dogs.name FROM dogs")]),
        ]);
        let preds = vec![
            prediction(0, 0, "SELECT count ( * ) FROM dogs"),
            prediction(1, 0, "SELECT owners.first_name FROM owners"),
        ];
        let r = evaluate(&preds, &c).unwrap();
        assert_eq!(r.question_match, r.interaction_match);
    }
}
