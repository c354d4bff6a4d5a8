//! Controlled English/Fake-English decipherment experiments for studying
//! unsupervised cross-lingual learning in jointly trained language models.

pub mod bpe;
pub mod corpus;
pub mod decipher;
pub mod error;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod seed;

pub use error::{Error, Result};
