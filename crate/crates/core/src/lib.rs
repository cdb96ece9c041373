//! Patch-Transformer forecasting with gated language-model feature fusion.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode gradients, Adam.
//! - [`data`]: CSV ingestion, Z-score and chronological splits, windows, RevIN.
//! - [`patching`]: end-padded overlapping patches.
//! - [`backbone`]: the patch Transformer encoder and forecasting head.
//! - [`semlm`]: the causal language model, tokenizer, weight manifests and LoRA.
//! - [`fusion`]: sigmoid-gated blending of the two representations.
//! - [`variants`]: the comparison models wired from the shared parts.
//! - [`harness`]: configuration, training, evaluation and exports.

pub mod backbone;
pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod patching;
pub mod semlm;
pub mod variants;

pub use error::{Error, Result};
