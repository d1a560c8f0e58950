use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::Backbone;
use super::config::ModelConfig;
use super::model::LmSession;
use super::sequence::LabeledSequence;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Gradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 8, lr: 3e-3 }
    }
}

/// LM training copy of a sequence: end token appended, clipped to `max_len`.
fn training_view(seq: &LabeledSequence, max_len: usize) -> LabeledSequence {
    let mut t = seq.terminated();
    t.tokens.truncate(max_len);
    t.first_len = None;
    t
}

/// Trains every backbone tensor by next-token maximum likelihood (Adam), then freezes it.
pub fn pretrain_backbone(
    corpus: &[LabeledSequence],
    config: ModelConfig,
    train: &PretrainConfig,
    seed: u64,
) -> Result<Backbone> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    for s in corpus {
        if let Some(&token) = s.tokens.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size: config.vocab_size });
        }
    }
    let mut backbone = Backbone::init(config, seed)?;
    if train.steps == 0 {
        return Ok(backbone);
    }
    let views: Vec<LabeledSequence> = corpus.iter().map(|s| training_view(s, config.max_len)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c0_4b05);
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut cursor = order.len();

    backbone.params_mut().set_trainable(true);
    let mut adam = Adam::new(backbone.params(), train.lr);
    let batch = train.batch_size.max(1);
    for step in 0..train.steps {
        let mut total = Gradients::zeros_like(backbone.params());
        let mut loss_sum = 0.0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &views[order[cursor]];
            cursor += 1;
            let mut s = LmSession::new(&backbone, None);
            let lp = s.token_logprobs(None, seq)?;
            let m = s.tape.mean(lp);
            let loss = s.tape.scale(m, -1.0);
            loss_sum += s.tape.scalar(loss);
            let g = s.tape.backward(loss)?.wrt(backbone.params());
            total.add_scaled(&g, 1.0 / batch as f64);
        }
        if !loss_sum.is_finite() {
            return Err(Error::Divergence { step });
        }
        adam.step(backbone.params_mut(), &total);
    }
    backbone.params_mut().set_trainable(false);
    Ok(backbone)
}

/// `exp` of the mean per-token negative log-likelihood of the bare backbone (end tokens included).
pub fn backbone_perplexity(backbone: &Backbone, data: &[LabeledSequence]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in data {
        let view = training_view(seq, backbone.config().max_len);
        for lp in super::model::backbone_token_logprobs(backbone, &view)? {
            nll -= lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("dataset"));
    }
    Ok(libm::exp(nll / count as f64))
}

/// Perplexity of the maximum-likelihood unigram model fitted to `data` and evaluated on it.
pub fn unigram_perplexity(data: &[LabeledSequence], vocab_size: usize, max_len: usize) -> Result<f64> {
    let mut counts = alloc::vec![0usize; vocab_size];
    let mut total = 0usize;
    for seq in data {
        for &t in &training_view(seq, max_len).tokens {
            counts[t] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut nll = 0.0;
    for &c in &counts {
        if c > 0 {
            nll -= c as f64 * libm::log(c as f64 / total as f64);
        }
    }
    Ok(libm::exp(nll / total as f64))
}
