//! Temporal topic trends from independently trained per-period word embeddings.
//!
//! A corpus of dated documents is cut into monthly or yearly slices, each slice
//! gets its own CBOW or skip-gram model, and the scaled cosine distance between
//! a base term and a set of relative terms is tracked across slices.

pub mod cluster;
pub mod corpus;
pub mod embedding;
pub mod pipeline;
pub mod preprocess;
pub mod trend;
