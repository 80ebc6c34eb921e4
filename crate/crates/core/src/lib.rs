//! Decoupled modality-aware prompt tuning for multi-modal object
//! re-identification, built on a small self-contained autodiff engine.
//!
//! A frozen multi-stream backbone (one vision encoder per modality plus a
//! shared text encoder) is steered by trainable modality and semantic
//! prompts; a bind-prompt interaction layer exchanges semantic information
//! across the three modalities before retrieval.

pub mod error;
pub mod numerics;
pub mod backbone;
pub mod prompt;
pub mod interaction;
pub mod objectives;
pub mod retrieval;
pub mod model;
pub mod datagen;
pub mod harness;

pub use error::{Error, Result};
