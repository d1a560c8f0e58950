//! Decoder-only transformer with a frozen backbone and per-label prefixes.

mod backbone;
mod config;
mod model;
mod prefix;
mod pretrain;
mod sequence;
mod vocab;

pub use backbone::Backbone;
pub(crate) use backbone::{forward, Layout};
pub use config::ModelConfig;
pub use model::{
    backbone_token_logprobs, next_token_distribution, next_token_logits, sequence_token_logprobs, LmSession,
};
pub use prefix::{PrefixBank, PREFIX_INIT_STD};
pub use pretrain::{backbone_perplexity, pretrain_backbone, unigram_perplexity, PretrainConfig};
pub use sequence::LabeledSequence;
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, SEP};
