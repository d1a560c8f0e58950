use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{self, record_sequence, record_weighted_gen};
use super::meta::meta_gradient;
use super::weightnet::WeightNet;
use crate::error::{Error, Result};
use crate::lm::{Backbone, LabeledSequence, LmSession, PrefixBank};
use crate::numerics::Gradients;

/// Training objective for the label-conditioned generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    /// Token-weighted generative loss with meta-learned weights.
    WeightedGen,
    /// Plain mean token NLL.
    Gen,
    /// NLL plus `μ` times the discriminative loss.
    GenDisc,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::WeightedGen, Objective::Gen, Objective::GenDisc];

    pub fn name(self) -> &'static str {
        match self {
            Objective::WeightedGen => "w-gen",
            Objective::Gen => "gen",
            Objective::GenDisc => "gen+disc",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown objective `{s}` (expected w-gen, gen or gen+disc)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningConfig {
    pub objective: Objective,
    /// Step size of the virtual lookahead update.
    pub lookahead_lr: f64,
    /// Step size of the weighting network.
    pub weight_lr: f64,
    /// Step size of the prefix update.
    pub prefix_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Coefficient of the discriminative term for [`Objective::GenDisc`].
    pub mu: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self { objective: Objective::WeightedGen, lookahead_lr: 2e-2, weight_lr: 1e-2, prefix_lr: 5e-3, batch_size: 2, epochs: 20, mu: 1.0 }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.batch_size == 0 {
            return bad("tuning batch size must be positive");
        }
        for (name, v) in [("lookahead_lr", self.lookahead_lr), ("weight_lr", self.weight_lr), ("prefix_lr", self.prefix_lr), ("mu", self.mu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(alloc::format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Losses at the start of one optimization step, before any update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub wgen: f64,
    pub gen: f64,
    pub disc: f64,
}

#[derive(Debug, Clone)]
pub struct TuningOutcome {
    pub prefixes: PrefixBank,
    pub weight_net: WeightNet,
    pub history: Vec<StepLosses>,
    /// Whether the discriminative denominator floor was ever hit.
    pub clamped: bool,
}

/// Per-token weights and discriminative values of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    pub sequence_id: u64,
    /// Scored tokens (positions excluded from the loss are dropped).
    pub tokens: Vec<usize>,
    pub weights: Vec<f64>,
    pub disc_values: Vec<f64>,
}

/// Gradient of the batch-mean loss of `objective` at the current prefixes, with
/// per-sequence token weights given (ignored by [`Objective::GenDisc`]).
fn descent_gradient(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    batch: &[LabeledSequence],
    weights: &[Vec<f64>],
    objective: Objective,
    mu: f64,
) -> Result<Gradients> {
    let inv = 1.0 / batch.len() as f64;
    let mut total = Gradients::zeros_like(prefixes.params());
    for (seq, w) in batch.iter().zip(weights) {
        let mut s = LmSession::new(backbone, Some(prefixes));
        let with_disc = objective == Objective::GenDisc;
        let vars = record_sequence(&mut s, seq, prefixes.num_labels(), with_disc)?;
        let loss = if with_disc {
            let n = s.tape.value(vars.logprobs).len();
            let gen = record_weighted_gen(&mut s, vars.logprobs, &losses::uniform_weights(n))?;
            let disc = s.tape.scale(vars.disc_scalar.expect("requested"), mu);
            s.tape.add(gen, disc)
        } else {
            record_weighted_gen(&mut s, vars.logprobs, w)?
        };
        total.add_scaled(&s.tape.backward(loss)?.wrt(prefixes.params()), inv);
    }
    Ok(total)
}

/// Per-token discriminative values and own-label log-probabilities at included positions.
fn observe(backbone: &Backbone, prefixes: &PrefixBank, seq: &LabeledSequence) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    let mut s = LmSession::new(backbone, Some(prefixes));
    let vars = record_sequence(&mut s, seq, prefixes.num_labels(), true)?;
    Ok((
        s.tape.value(vars.disc_ratio.expect("requested")).data().to_vec(),
        s.tape.value(vars.logprobs).data().to_vec(),
        vars.clamped,
    ))
}

fn diverged(losses: &StepLosses) -> bool {
    !(losses.wgen.is_finite() && losses.gen.is_finite() && losses.disc.is_finite())
}

/// Trains the prefix bank on the few-shot set with the chosen objective.
///
/// Each epoch shuffles the data and walks it in minibatches. For
/// [`Objective::WeightedGen`] every minibatch runs a lookahead step, updates
/// the weighting network from the lookahead discriminative loss, then updates
/// the prefixes on the weighted generative loss under the new weights. The other
/// objectives take a single descent step per minibatch.
pub fn tune_generators(
    backbone: &Backbone,
    train: &[LabeledSequence],
    init: PrefixBank,
    weight_net: WeightNet,
    config: &TuningConfig,
    seed: u64,
) -> Result<TuningOutcome> {
    config.validate()?;
    if init.num_labels() < 2 {
        return Err(Error::InvalidConfig("tuning needs at least two labels".into()));
    }
    if config.epochs > 0 && train.is_empty() {
        return Err(Error::Empty("few-shot training set"));
    }
    for seq in train {
        seq.validate(backbone.config().vocab_size, init.num_labels(), backbone.config().max_len)?;
    }
    let mut prefixes = init;
    let mut net = weight_net;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut clamped = false;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let step = history.len();
            let batch: Vec<LabeledSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let inv = 1.0 / batch.len() as f64;

            let (record, weights) = if config.objective == Objective::WeightedGen {
                let meta = meta_gradient(backbone, &prefixes, &net, &batch, config.lookahead_lr)?;
                let record = StepLosses { step, wgen: meta.wgen_loss, gen: meta.gen_loss, disc: meta.disc_loss };
                clamped |= meta.clamped;
                if diverged(&record) || !meta.grad.is_finite() {
                    return Err(Error::Divergence { step });
                }
                net.params_mut().sgd_step(&meta.grad, config.weight_lr);
                let weights =
                    meta.sequences.iter().map(|t| net.weights(&t.disc_values)).collect::<Result<Vec<_>>>()?;
                (record, weights)
            } else {
                let mut record = StepLosses { step, wgen: 0.0, gen: 0.0, disc: 0.0 };
                let mut weights = Vec::with_capacity(batch.len());
                for seq in &batch {
                    let (disc_values, logprobs, c) = observe(backbone, &prefixes, seq)?;
                    clamped |= c;
                    record.wgen += losses::weighted_gen_loss(&logprobs, &net.weights(&disc_values)?)? * inv;
                    record.gen += losses::gen_loss(&logprobs)? * inv;
                    record.disc -= disc_values.iter().sum::<f64>() / disc_values.len() as f64 * inv;
                    weights.push(losses::uniform_weights(logprobs.len()));
                }
                if diverged(&record) {
                    return Err(Error::Divergence { step });
                }
                (record, weights)
            };

            let grad = descent_gradient(backbone, &prefixes, &batch, &weights, config.objective, config.mu)?;
            if !grad.is_finite() {
                return Err(Error::Divergence { step });
            }
            prefixes.params_mut().sgd_step(&grad, config.prefix_lr);
            if !prefixes.params().is_finite() || !net.params().is_finite() {
                return Err(Error::Divergence { step });
            }
            history.push(record);
        }
    }
    Ok(TuningOutcome { prefixes, weight_net: net, history, clamped })
}

/// Token weights and discriminative values for each sequence under the given prefixes and network.
pub fn token_weights(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    net: &WeightNet,
    seqs: &[LabeledSequence],
) -> Result<Vec<TokenWeights>> {
    seqs.iter()
        .map(|seq| {
            let (disc_values, _, _) = observe(backbone, prefixes, seq)?;
            Ok(TokenWeights {
                sequence_id: seq.id,
                tokens: seq.tokens.iter().enumerate().filter(|(j, _)| !seq.is_excluded(*j)).map(|(_, &t)| t).collect(),
                weights: net.weights(&disc_values)?,
                disc_values,
            })
        })
        .collect()
}

/// Batch-mean discriminative loss of `data` (no gradient).
pub fn mean_disc_loss(backbone: &Backbone, prefixes: &PrefixBank, data: &[LabeledSequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut total = 0.0;
    for seq in data {
        total += losses::disc_loss(backbone, prefixes, seq)?.scalar;
    }
    Ok(total / data.len() as f64)
}

