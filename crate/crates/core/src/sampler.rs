//! Label-conditioned sampling with temperature, top-k and repetition penalty.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{next_token_logits, Backbone, LabeledSequence, PrefixBank, BOS, EOS, PAD, SEP};

/// Upper bound on the sampling temperature.
pub const MAX_TEMPERATURE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    /// Condition on a first sequence drawn from the corpus, generate the second.
    Pair,
}

/// How the generated continuation starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartPolicy {
    /// Start from the bare prefix.
    Empty,
    /// Begin with one token drawn uniformly from the list.
    RandomToken(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    /// `τ ≥ 0`; zero selects greedy decoding.
    pub temperature: f64,
    /// `α_rep ≥ 1`.
    pub repetition_penalty: f64,
    /// Keep only the `k` highest logits; zero disables the cut.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub mode: Mode,
    pub start: StartPolicy,
    pub samples_per_label: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            repetition_penalty: 1.1,
            top_k: 10,
            max_new_tokens: 24,
            mode: Mode::Single,
            start: StartPolicy::Empty,
            samples_per_label: 500,
        }
    }
}

impl GenerationConfig {
    /// Greedy second-sequence generation; `α_rep = 1` for labels whose second
    /// sequence tends to reuse the first one's tokens, 1.5 otherwise.
    pub fn pair_default(favors_overlap: bool) -> Self {
        Self {
            temperature: 0.0,
            repetition_penalty: if favors_overlap { 1.0 } else { 1.5 },
            top_k: 0,
            mode: Mode::Pair,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let err = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.temperature >= 0.0 && self.temperature <= MAX_TEMPERATURE) {
            return err("temperature must lie in [0, 10]");
        }
        if !(self.repetition_penalty >= 1.0) || !self.repetition_penalty.is_finite() {
            return err("repetition penalty must be at least 1");
        }
        if self.top_k > vocab_size {
            return err("top-k exceeds the vocabulary size");
        }
        if self.max_new_tokens == 0 {
            return err("max_new_tokens must be positive");
        }
        if self.samples_per_label == 0 {
            return err("samples per label must be positive");
        }
        if let StartPolicy::RandomToken(list) = &self.start {
            if list.is_empty() {
                return err("start token list is empty");
            }
            if let Some(&token) = list.iter().find(|&&t| t >= vocab_size || is_special(t)) {
                return Err(Error::TokenOutOfRange { token, vocab_size });
            }
        }
        Ok(())
    }
}

fn is_special(t: usize) -> bool {
    t == PAD || t == BOS || t == SEP || t == EOS
}

fn repeated_mask(len: usize, generated: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; len];
    for &t in generated {
        if t < len {
            mask[t] = true;
        }
    }
    mask
}

/// `p_i ∝ exp(z_i / ω_i)` with `ω_i = τ·α_rep` for tokens in `generated`, `τ` otherwise.
/// Logits of `−∞` get probability zero.
pub fn penalized_distribution(logits: &[f64], generated: &[usize], temperature: f64, penalty: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if temperature == 0.0 {
        return Err(Error::GreedyHandledByCaller);
    }
    if !(temperature > 0.0) || !(penalty >= 1.0) {
        return Err(Error::InvalidConfig("temperature must be positive and penalty at least 1".into()));
    }
    let rep = repeated_mask(logits.len(), generated);
    let scaled: Vec<f64> = logits
        .iter()
        .zip(&rep)
        .map(|(&z, &r)| if r { z / (temperature * penalty) } else { z / temperature })
        .collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::InvalidConfig("every token is masked".into()));
    }
    let mut p: Vec<f64> = scaled.iter().map(|s| libm::exp(s - m)).collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

/// Greedy choice: argmax of `z_i / α_rep` for repeated tokens and `z_i` otherwise (lowest index on ties).
pub fn greedy_token(logits: &[f64], generated: &[usize], penalty: f64) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let rep = repeated_mask(logits.len(), generated);
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (&z, &r)) in logits.iter().zip(&rep).enumerate() {
        let v = if r { z / penalty } else { z };
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    if best_v == f64::NEG_INFINITY {
        return Err(Error::InvalidConfig("every token is masked".into()));
    }
    Ok(best)
}

/// Sets every logit outside the `k` largest to `−∞` (ties broken by lower index).
pub fn top_k_mask(logits: &mut [f64], k: usize) {
    if k == 0 || k >= logits.len() {
        return;
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for &i in &idx[k..] {
        logits[i] = f64::NEG_INFINITY;
    }
}

/// Draws an index from a probability vector.
fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Post-processed logits used at each step: special tokens masked, end-of-sequence
/// masked for the first generated token, then the top-k cut.
pub fn step_logits(raw: &[f64], first_step: bool, top_k: usize) -> Vec<f64> {
    let mut z = raw.to_vec();
    for t in [PAD, BOS, SEP] {
        z[t] = f64::NEG_INFINITY;
    }
    if first_step {
        z[EOS] = f64::NEG_INFINITY;
    }
    top_k_mask(&mut z, top_k);
    z
}

/// Generates one continuation under `label`'s prefix. In pair mode `conditioning`
/// is the first sequence; the returned tokens are the continuation only, without
/// the end-of-sequence marker.
pub fn sample_sequence(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    label: usize,
    config: &GenerationConfig,
    rng: &mut impl Rng,
    conditioning: Option<&[usize]>,
) -> Result<Vec<usize>> {
    prefixes.check_label(label)?;
    let max_len = backbone.config().max_len;
    config.validate(backbone.config().vocab_size)?;
    let mut context = Vec::new();
    match (config.mode, conditioning) {
        (Mode::Pair, Some(first)) => {
            if first.len() + 1 >= max_len {
                return Err(Error::ContextTooLong { len: first.len() + 1, max: max_len - 1 });
            }
            context.extend_from_slice(first);
            context.push(SEP);
        }
        (Mode::Pair, None) => return Err(Error::InvalidConfig("pair mode needs a conditioning sequence".into())),
        (Mode::Single, Some(_)) => return Err(Error::InvalidConfig("single mode takes no conditioning".into())),
        (Mode::Single, None) => {}
    }
    let start = context.len();
    if let StartPolicy::RandomToken(list) = &config.start {
        context.push(list[rng.random_range(0..list.len())]);
    }
    while context.len() - start < config.max_new_tokens && context.len() < max_len {
        let raw = next_token_logits(backbone, Some(prefixes), Some(label), &context)?;
        let z = step_logits(&raw, context.len() == start, config.top_k);
        let generated = &context[start..];
        let token = if config.temperature == 0.0 {
            greedy_token(&z, generated, config.repetition_penalty)?
        } else {
            let p = penalized_distribution(&z, generated, config.temperature, config.repetition_penalty)?;
            draw(&p, rng)
        };
        if token == EOS {
            break;
        }
        context.push(token);
    }
    Ok(context.split_off(start))
}

/// Independent stream for sample `index` of `label`.
pub fn sample_rng(seed: u64, label: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label as u64) << 32) | index as u64);
    rng
}

/// `N` samples per label, labeled with the generating prefix. Pair mode draws
/// each first sequence uniformly from `corpus`.
pub fn synthesize_dataset(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    configs: &[GenerationConfig],
    corpus: &[Vec<usize>],
    seed: u64,
) -> Result<Vec<LabeledSequence>> {
    if configs.len() != prefixes.num_labels() {
        return Err(Error::LengthMismatch { left: configs.len(), right: prefixes.num_labels() });
    }
    let mut out = Vec::new();
    let mut id = 0u64;
    for (label, cfg) in configs.iter().enumerate() {
        cfg.validate(backbone.config().vocab_size)?;
        if cfg.mode == Mode::Pair && corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        for i in 0..cfg.samples_per_label {
            let mut rng = sample_rng(seed, label, i);
            let seq = match cfg.mode {
                Mode::Single => {
                    let tokens = sample_sequence(backbone, prefixes, label, cfg, &mut rng, None)?;
                    LabeledSequence::single(id, tokens, label)
                }
                Mode::Pair => {
                    let first = &corpus[rng.random_range(0..corpus.len())];
                    let second = sample_sequence(backbone, prefixes, label, cfg, &mut rng, Some(first))?;
                    LabeledSequence::pair(id, first, &second, label)
                }
            };
            out.push(seq);
            id += 1;
        }
    }
    Ok(out)
}
