//! SQL query and utterance tokenization.
//!
//! Queries are split on whitespace and punctuation. Schema references stay
//! single tokens in `table.column` form, reserved words are canonicalized
//! (keywords uppercase, aggregates lowercase), and each quoted string or
//! number stays a single literal token until [`anonymize_values`] collapses
//! it to the shared placeholder.

use crate::error::{Error, Result};

/// Placeholder every string and number literal is anonymized to.
pub const VALUE_TOKEN: &str = "value";

/// End-of-sequence marker appended to decoder targets.
pub const EOS_TOKEN: &str = "EOS";

/// Keywords canonicalized to uppercase.
const UPPER_WORDS: &[&str] = &[
    "SELECT", "FROM", "WHERE", "GROUP", "ORDER", "BY", "LIMIT", "JOIN", "ON", "AS", "AND", "OR",
    "NOT", "IN", "LIKE", "BETWEEN", "HAVING", "DESC", "ASC", "UNION", "INTERSECT", "EXCEPT",
];

/// Aggregates and modifiers canonicalized to lowercase.
const LOWER_WORDS: &[&str] = &["count", "sum", "avg", "min", "max", "distinct"];

/// Operator and punctuation tokens, longest first so the scanner is greedy.
const SYMBOLS: &[&str] = &[
    "<=", ">=", "!=", "<>", "=", "<", ">", "+", "-", "*", "/", "%", "(", ")", ",", ";",
];

/// Canonical form of a reserved word, if `word` is one (case-insensitive).
pub fn canonical_reserved(word: &str) -> Option<&'static str> {
    UPPER_WORDS
        .iter()
        .chain(LOWER_WORDS.iter())
        .chain(SYMBOLS.iter())
        .find(|w| w.eq_ignore_ascii_case(word))
        .copied()
}

/// True for tokens the gold-query grammar may start with or emit outside the
/// schema: reserved words, operators, the value placeholder, end marker.
pub fn is_reserved(token: &str) -> bool {
    token == VALUE_TOKEN || token == EOS_TOKEN || canonical_reserved(token) == Some(token)
}

/// True for single-token string or number literals.
pub fn is_literal(token: &str) -> bool {
    let mut chars = token.chars();
    match chars.next() {
        Some('\'') | Some('"') => true,
        Some(c) if c.is_ascii_digit() => token.chars().all(|c| c.is_ascii_digit() || c == '.'),
        _ => false,
    }
}

/// Tokenizes a SQL string. See module docs for the rules.
pub fn tokenize_query(sql: &str) -> Result<Vec<String>> {
    let chars: Vec<char> = sql.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '\'' || c == '"' {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i] != c {
                i += 1;
            }
            if i == chars.len() {
                return Err(Error::SqlParse {
                    position: start,
                    message: "unbalanced quote".into(),
                });
            }
            i += 1;
            tokens.push(chars[start..i].iter().collect());
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_alphanumeric()
                    || chars[i] == '_'
                    || chars[i] == '.'
                    || chars[i] == '$')
            {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            match canonical_reserved(&word) {
                Some(canon) => tokens.push(canon.to_string()),
                None => tokens.push(word.to_ascii_lowercase()),
            }
            continue;
        }
        if i + 1 < chars.len() {
            let pair: String = chars[i..i + 2].iter().collect();
            if SYMBOLS.contains(&pair.as_str()) {
                tokens.push(pair);
                i += 2;
                continue;
            }
        }
        let single = c.to_string();
        if SYMBOLS.contains(&single.as_str()) {
            tokens.push(single);
            i += 1;
            continue;
        }
        return Err(Error::SqlParse {
            position: i,
            message: format!("unexpected character `{c}`"),
        });
    }
    if tokens.is_empty() {
        return Err(Error::SqlParse {
            position: 0,
            message: "empty query".into(),
        });
    }
    Ok(tokens)
}

/// Replaces every literal token with [`VALUE_TOKEN`]. Idempotent and
/// length-preserving.
pub fn anonymize_values(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            if is_literal(t) {
                VALUE_TOKEN.to_string()
            } else {
                t.clone()
            }
        })
        .collect()
}

/// Joins tokens with single spaces (inverse of tokenization on normalized
/// queries).
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Whitespace tokenization for utterances: lowercased, with the `--` marker
/// that introduces system clarifications replaced by a `;` separator so the
/// turn stays one stream.
pub fn tokenize_utterance(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            if w == "--" {
                ";".to_string()
            } else {
                w.to_ascii_lowercase()
            }
        })
        .collect()
}

/// Splits an identifier into lowercase words (on `_` and other non
/// alphanumerics). `*` is its own single word.
pub fn split_words(ident: &str) -> Vec<String> {
    if ident == "*" {
        return vec!["*".to_string()];
    }
    ident
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}
