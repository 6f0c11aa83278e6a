//! Transformer encoder region-word alignment for cross-modal retrieval.
//!
//! Two independent encoder pipelines turn image regions and caption words
//! into vectors in a shared space; an image-sentence score is pooled from
//! their cosine alignment matrix and trained with a hard-negative triplet
//! loss. The crate also carries the retrieval metrics used to evaluate it.

pub mod alignment;
mod binio;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pipeline;

pub use error::{Error, Result};
