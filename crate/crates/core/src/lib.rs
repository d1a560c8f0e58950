//! Label-discriminative few-shot data generation.
//!
//! A small decoder-only transformer is pretrained and frozen; each label gets
//! its own trainable attention prefix. Prefixes are tuned with a token-weighted
//! likelihood whose weights come from a small network trained, through a
//! one-step lookahead, to lower a discriminative loss across labels. The tuned
//! generators synthesize labeled data, and a classifier is trained on it with
//! label smoothing, temporal ensembling and confidence filtering.
//!
//! The crate is `no_std` and needs only `alloc`; file formats, configuration
//! and the command line live in the companion `fewgen` crate.

#![no_std]

extern crate alloc;

pub mod classifier;
mod error;
pub mod gradcheck;
pub mod lm;
pub mod numerics;
pub mod sampler;
pub mod task;
pub mod tuning;

pub use error::{Error, Result};
