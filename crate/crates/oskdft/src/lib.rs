//! Joint knowledge-distillation + speaker-verification fine-tuning of a
//! small transformer speech encoder, with baseline pipelines and an
//! equal-error-rate evaluation harness.
//!
//! Layout:
//! - [`model`]: CNN frame extractor, pre-norm transformer encoder, adapters,
//!   and the dual-path forward/backward used for joint training.
//! - [`head`]: utterance pooling, speaker embedding, additive-angular-margin
//!   classifier.
//! - [`distill`]: distillation losses (MSE, KL) against a frozen teacher.
//! - [`schedule`]: per-module learning-rate curves.
//! - [`init`]: student initialization from a teacher checkpoint.
//! - [`data`]: synthetic speaker corpus, crops, augmentation, trial lists.
//! - [`eval`]: scoring and equal-error-rate computation.
//! - [`trainer`]: optimizer, training modes, run directories, resume.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod init;
pub mod kv;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};

mod cli;
pub use cli::run_cli;
