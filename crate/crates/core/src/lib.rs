//! Two-stage generative target speaker extraction with decoder-only token
//! language models.
//!
//! A semantic LM predicts k-means tokens of the target speaker from
//! continuous reference and mixture embeddings; an acoustic LM then
//! predicts single-codebook codec tokens from those semantic tokens plus
//! codec-encoder features. Two fine-tuning procedures sit on top of
//! teacher-forced training: Frozen-LM Conditioning, which trains a clone on
//! histories predicted by a frozen copy, and Direct Preference
//! Optimization over sampled candidate pairs.
//!
//! Everything runs at desk scale on a synthetic two-speaker task
//! ([`data`]); real extractors, codecs and scorers plug in through the
//! traits in [`tokenize`] and [`dpo`].

pub mod cli;
pub mod data;
pub mod domain;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod kv;
pub mod lm;
pub mod pipeline;
pub mod seed;
pub mod stage;
pub mod tokenize;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
