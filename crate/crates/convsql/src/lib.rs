//! Context-dependent text-to-SQL at desk scale.
//!
//! This crate trains and evaluates a conversational semantic parser: an
//! encoder-decoder that maps a sequence of natural-language questions over a
//! relational schema to SQL queries, one query per turn. The schema is
//! encoded as a graph whose layers attend both within the current turn and
//! back to the previous turn's node states, and the decoder emits tokens from
//! a gated union of SQL keywords, schema items, and previous-query tokens.
//!
//! The numeric core is a self-contained reverse-mode autodiff tape over
//! `f64` matrices ([`tape`]), which keeps every gradient checkable against
//! finite differences.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod tape;
pub mod text;
pub mod train;

pub use error::{Error, Result};

// The guide's code blocks run under `cargo test --doc`: each chapter is
// included as a hidden module's documentation, one module per chapter so a
// failure names its origin.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/schema-graph.md")]
    mod schema_graph {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
