//! Entity-replacement pretraining toolkit.
//!
//! The pipeline has four stages, each exposed as a library module and a CLI
//! subcommand:
//!
//! - [`kb`]: load and index an entity store (aliases, types) and factual
//!   triples; serve type-constrained sampling pools and per-relation
//!   candidate sets.
//! - [`corpus`]: recognize entity mentions in anchored documents, chunk
//!   them, and emit replicated training instances in which a non-adjacent
//!   subset of mentions has been replaced by same-type entities, plus
//!   restricted masking outside entity spans.
//! - [`nn`] / [`train`]: a small transformer encoder with exact manual
//!   backpropagation, a boundary-word replacement-detection head and an MLM
//!   head, trained jointly with AdamW.
//! - [`probe`]: zero-shot fact completion — render cloze queries from
//!   templates, rank candidate entities under pluggable scorers, and report
//!   per-relation Hits@k.

pub mod corpus;
pub mod kb;
pub mod manifest;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod span;
pub mod tokenize;
pub mod train;
pub mod vocab;
