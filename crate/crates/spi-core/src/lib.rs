//! Semantic pyramid indexing: multi-resolution vector search with
//! progressive coarse-to-fine retrieval, query-adaptive depth control, and
//! a scatter-gather distribution fabric.

pub mod bench;
pub mod cache;
pub mod controller;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod fabric;
pub mod format;
pub mod index;
pub mod math;
pub mod metrics;
pub mod pipeline;
pub mod pyramid;

pub use error::{Result, SpiError};
