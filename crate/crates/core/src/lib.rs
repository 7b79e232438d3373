//! Multi-label tagging of long documents against very large label sets.
//!
//! The crate bundles four classifiers (a tf-idf one-vs-all linear model, a
//! continuous bag of words, a convolutional n-gram model and a hierarchical
//! attention bidirectional GRU), the text normalization pipeline that feeds
//! them, Micro-F scoring and explanation reports built from max-pool
//! triggers and attention weights.
//!
//! All neural models run on the small reverse-mode autodiff engine in
//! [`tensor`].

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gradsuite;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod textprep;
pub mod train;

pub use error::{Error, Result};
