//! Taxonomy-aware losses, conditional feature synthesis and detection
//! metrics for fine-grained zero-shot detection experiments, with a small
//! reverse-mode differentiation core so every loss is trainable and
//! gradient-checkable without an external framework.

pub mod alignment;
pub mod data_model;
pub mod error;
pub mod fusion;
pub mod hicl;
pub mod metrics;
pub mod numerics;
pub mod taxonomy;

pub use error::{Error, Result};
