//! Conditional span infilling over tokenized IUPAC names.
//!
//! Names are segmented into typed tokens ([`vocab`]), labelled with a
//! property bucket ([`property`]), corrupted into sentinel-masked training
//! pairs ([`corruption`]) and used to train a small encoder-decoder model
//! ([`model`]). Edits swap the bucket token and infill masked spans;
//! [`eval`] measures the outcome.

pub mod corpus;
pub mod corruption;
pub mod edit;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod model;
pub mod property;
pub mod vocab;

pub use error::{Error, Result};
pub use property::{proxy_property, PropertyBucket, PropertyKind, PropertyOracle, PropertySpec};
pub use vocab::{TokenClass, TokenId, TokenSequence, Vocabulary, MAX_CONTENT_TOKENS, SENTINEL_COUNT};
