//! Prefix tuning of label-conditioned generators with meta-learned token weights.

mod losses;
mod meta;
mod train;
mod weightnet;

pub use losses::{
    combined_loss, disc_from_probabilities, disc_loss, gen_loss, included, record_sequence, record_weighted_gen,
    uniform_weights, weighted_gen_loss, DiscLoss, SequenceVars, DISC_DENOM_FLOOR,
};
pub use meta::{disc_gradient, lookahead_disc_loss, meta_gradient, meta_gradient_scaled, MetaStep, SequenceTrace};
pub use train::{mean_disc_loss, token_weights, tune_generators, Objective, StepLosses, TokenWeights, TuningConfig, TuningOutcome};
pub use weightnet::{WeightNet, WEIGHT_NET_HIDDEN};
