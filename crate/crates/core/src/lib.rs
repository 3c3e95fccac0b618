//! Two-stage tri-modal pre-training with adapters.
//!
//! Stage 1 re-aligns (domain-shifted) image features with text features
//! through a residual image adapter. Stage 2 trains a point-cloud encoder
//! whose output is split by two adapters into a vision-focused and a
//! semantics-focused embedding, aligned to adapted image features and to text
//! features respectively. Evaluation covers zero-shot classification, linear
//! probing, few-shot episodes and cross-modal retrieval.

pub mod adapters;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod numkit;
pub mod rng;
pub mod train;

pub use error::{Result, TammError};
