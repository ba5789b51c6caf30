//! Fact-tracing benchmark engine.
//!
//! The pipeline generates a synthetic fact corpus ([`synthgen`]), trains a
//! tiny encoder-decoder on it ([`model`]), scores attribution-set examples
//! against queries with gradient and embedding similarity ([`attribution`])
//! or lexical overlap ([`bm25`]), and evaluates the rankings under the
//! candidate-set reranking protocol ([`eval`]).

pub mod attribution;
pub mod bm25;
pub mod error;
pub mod eval;
pub mod model;
pub mod synthgen;

pub use error::{Error, Result};
