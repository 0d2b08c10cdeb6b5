//! Desk-scale latent reasoning for a tiny decoder-only transformer.
//!
//! A small language model is trained to reason in a latent space constrained
//! to the column space of its token-embedding matrix: each latent step is a
//! probability-weighted mixture of vocabulary embeddings (a soft embedding)
//! instead of a sampled token. The crate covers the full pipeline:
//!
//! - [`num`]: dense f64 tensors with reverse-mode autodiff and the
//!   probability/divergence primitives everything else builds on.
//! - [`model`]: the decoder-only transformer with a tied embedding/head and
//!   support for mixed token/dense-vector inputs under arbitrary masks.
//! - [`segmask`]: chain segmentation and the two specialized attention masks
//!   (induction mask for the encoder, supervision mask for the decoder).
//! - [`latent`]: soft-embedding construction and both training objectives.
//! - [`synthdata`]: deterministic arithmetic reasoning corpora and the
//!   character-level tokenizer over a closed vocabulary.
//! - [`training`]: the three training stages with checkpointing and resume.
//! - [`infer`]: latent-mode generation with collapse detection and tracing.
//! - [`analysis`]: trace metrics (ECR@K, path posterior / N_eff / Top-2) and
//!   distribution diagnostics (effective rank, FID, MMD², cosine sampling).

pub mod analysis;
pub mod ckpt;
pub mod error;
pub mod infer;
pub mod latent;
pub mod model;
pub mod num;
pub mod par;
pub mod reproduce;
pub mod segmask;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
