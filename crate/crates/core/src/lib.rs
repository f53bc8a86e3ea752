//! Compositional zero-shot domain transfer for text-to-text models.
//!
//! The crate is organised bottom-up:
//!
//! - [`text`]: vocabulary, synthetic two-domain worlds and their datasets.
//! - [`model`]: a small reverse-mode autodiff engine and an encoder-decoder
//!   transformer with decoding, scoring, Adam and checkpointing.
//! - [`objectives`]: MLM masking, prompt formatting, batch mixing and the
//!   joint / task loss composition.
//! - [`datagen`]: counterfactual summaries, pseudo-NLI and contrastive sets.
//! - [`pipeline`]: continual pretraining, self-finetuning, embedding
//!   finetuning and zero-shot inference.
//! - [`metrics`]: classification, lexical, entity, retrieval and correlation
//!   metrics plus the zero-rule baseline.
//! - [`analysis`]: the control-code attention probe.

pub mod analysis;
pub mod datagen;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod seed;
pub mod text;

mod error;

pub use error::{Error, Result};
