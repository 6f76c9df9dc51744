//! Knowledge-augmented language modeling.
//!
//! An LSTM language model whose next-word distribution mixes a general
//! vocabulary with one vocabulary per entity type from a knowledge base. The
//! mixture weights form a latent type posterior that is trained only through
//! the language-modeling objective, and that posterior doubles as an
//! unsupervised named-entity tagger.

pub mod corpus;
pub mod error;
pub mod inference;
pub mod kb;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
