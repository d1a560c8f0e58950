use alloc::vec::Vec;

use super::losses::record_sequence;
use super::weightnet::WeightNet;
use crate::error::{Error, Result};
use crate::lm::{Backbone, LabeledSequence, LmSession, PrefixBank};
use crate::numerics::{Gradients, Tape, Tensor};

/// Per-sequence quantities observed during one meta step.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTrace {
    pub sequence_id: u64,
    /// Token weights at the current prefixes (included positions).
    pub weights: Vec<f64>,
    /// Per-token discriminative ratios at the current prefixes.
    pub disc_values: Vec<f64>,
    /// `G · ∂(−log p_j)/∂θ`, the alignment of each token's gradient with the lookahead discriminative gradient.
    pub alignment: Vec<f64>,
}

/// Result of [`meta_gradient`].
#[derive(Debug, Clone)]
pub struct MetaStep {
    /// Gradient of the lookahead discriminative loss with respect to the weighting network.
    pub grad: Gradients,
    /// Batch-mean weighted generative loss at the current prefixes.
    pub wgen_loss: f64,
    /// Batch-mean plain generative loss at the current prefixes.
    pub gen_loss: f64,
    /// Batch-mean discriminative loss at the current prefixes.
    pub disc_loss: f64,
    /// Batch-mean discriminative loss at the lookahead prefixes.
    pub lookahead_disc_loss: f64,
    pub clamped: bool,
    pub sequences: Vec<SequenceTrace>,
}

struct TokenGrads {
    disc_values: Vec<f64>,
    logprobs: Vec<f64>,
    /// Gradient of `−log p_j` for each included token.
    nll_grads: Vec<Gradients>,
    clamped: bool,
}

fn token_grads(backbone: &Backbone, prefixes: &PrefixBank, seq: &LabeledSequence) -> Result<TokenGrads> {
    let mut s = LmSession::new(backbone, Some(prefixes));
    let vars = record_sequence(&mut s, seq, prefixes.num_labels(), true)?;
    let n = s.tape.value(vars.logprobs).len();
    let mut nll_grads = Vec::with_capacity(n);
    for j in 0..n {
        let e = s.tape.element(vars.logprobs, j);
        let mut g = s.tape.backward(e)?.wrt(prefixes.params());
        g.scale(-1.0);
        nll_grads.push(g);
    }
    Ok(TokenGrads {
        disc_values: s.tape.value(vars.disc_ratio.expect("requested")).data().to_vec(),
        logprobs: s.tape.value(vars.logprobs).data().to_vec(),
        nll_grads,
        clamped: vars.clamped,
    })
}

/// Gradient of the batch-mean discriminative loss with respect to the whole bank.
pub fn disc_gradient(backbone: &Backbone, prefixes: &PrefixBank, batch: &[LabeledSequence]) -> Result<(f64, Gradients, bool)> {
    let mut total = Gradients::zeros_like(prefixes.params());
    let mut loss = 0.0;
    let mut clamped = false;
    let inv = 1.0 / batch.len() as f64;
    for seq in batch {
        let mut s = LmSession::new(backbone, Some(prefixes));
        let vars = record_sequence(&mut s, seq, prefixes.num_labels(), true)?;
        let d = vars.disc_scalar.expect("requested");
        loss += s.tape.scalar(d) * inv;
        clamped |= vars.clamped;
        total.add_scaled(&s.tape.backward(d)?.wrt(prefixes.params()), inv);
    }
    Ok((loss, total, clamped))
}

/// One-step-lookahead gradient of the discriminative loss with respect to the
/// weighting network.
///
/// With per-token NLL gradients `g_j` at the current prefixes and weights `w_j(ω)`,
/// the lookahead is `θ̂ = θ − α (1/|B|) Σ_s Σ_j w_j g_j`. If `G` is the gradient of the
/// discriminative loss at `θ̂`, then `∂L_disc(θ̂)/∂ω = −α (1/|B|) Σ_s Σ_j (G·g_j) ∂w_j/∂ω`.
pub fn meta_gradient(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    net: &WeightNet,
    batch: &[LabeledSequence],
    alpha: f64,
) -> Result<MetaStep> {
    meta_gradient_scaled(backbone, prefixes, net, batch, alpha, 1.0)
}

/// [`meta_gradient`] with the discriminative gradient `G` multiplied by `disc_scale`
/// (`−1` flips its sign, which negates the result).
pub fn meta_gradient_scaled(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    net: &WeightNet,
    batch: &[LabeledSequence],
    alpha: f64,
    disc_scale: f64,
) -> Result<MetaStep> {
    if batch.is_empty() {
        return Err(Error::Empty("minibatch"));
    }
    if prefixes.num_labels() < 2 {
        return Err(Error::InvalidConfig("meta-weighting needs at least two labels".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let per_seq = batch.iter().map(|s| token_grads(backbone, prefixes, s)).collect::<Result<Vec<_>>>()?;
    let weights = per_seq.iter().map(|t| net.weights(&t.disc_values)).collect::<Result<Vec<_>>>()?;

    let mut step = Gradients::zeros_like(prefixes.params());
    let (mut wgen, mut gen, mut disc) = (0.0, 0.0, 0.0);
    let mut clamped = false;
    for (t, w) in per_seq.iter().zip(&weights) {
        for (g, wj) in t.nll_grads.iter().zip(w) {
            step.add_scaled(g, wj * inv);
        }
        wgen += super::losses::weighted_gen_loss(&t.logprobs, w)? * inv;
        gen += super::losses::gen_loss(&t.logprobs)? * inv;
        disc -= t.disc_values.iter().sum::<f64>() / t.disc_values.len() as f64 * inv;
        clamped |= t.clamped;
    }
    let mut lookahead = prefixes.clone();
    lookahead.params_mut().sgd_step(&step, alpha);

    let (lookahead_disc, mut big_g, c2) = disc_gradient(backbone, &lookahead, batch)?;
    big_g.scale(disc_scale);
    clamped |= c2;

    let mut tape = Tape::new();
    let w = net.params().bind(&mut tape);
    let mut objective = None;
    let mut sequences = Vec::with_capacity(batch.len());
    for ((seq, t), wv) in batch.iter().zip(&per_seq).zip(&weights) {
        let alignment: Vec<f64> = t.nll_grads.iter().map(|g| big_g.dot(g)).collect();
        let wvar = net.record(&mut tape, &w, &t.disc_values)?;
        let coef = tape.input(Tensor::from_fn(&[alignment.len()], |j| -alpha * inv * alignment[j]));
        let term = tape.dot(wvar, coef);
        objective = Some(match objective {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
        sequences.push(SequenceTrace {
            sequence_id: seq.id,
            weights: wv.clone(),
            disc_values: t.disc_values.clone(),
            alignment,
        });
    }
    let grad = tape.backward(objective.expect("non-empty batch"))?.wrt(net.params());
    Ok(MetaStep { grad, wgen_loss: wgen, gen_loss: gen, disc_loss: disc, lookahead_disc_loss: lookahead_disc, clamped, sequences })
}

/// `L_disc` at the lookahead reached with the given network, as a function of the network.
/// Used to check [`meta_gradient`] by finite differences.
pub fn lookahead_disc_loss(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    net: &WeightNet,
    batch: &[LabeledSequence],
    alpha: f64,
) -> Result<f64> {
    let inv = 1.0 / batch.len() as f64;
    let mut step = Gradients::zeros_like(prefixes.params());
    for seq in batch {
        let mut s = LmSession::new(backbone, Some(prefixes));
        let vars = record_sequence(&mut s, seq, prefixes.num_labels(), true)?;
        let values = s.tape.value(vars.disc_ratio.expect("requested")).data().to_vec();
        let w = net.weights(&values)?;
        let loss = super::losses::record_weighted_gen(&mut s, vars.logprobs, &w)?;
        step.add_scaled(&s.tape.backward(loss)?.wrt(prefixes.params()), inv);
    }
    let mut lookahead = prefixes.clone();
    lookahead.params_mut().sgd_step(&step, alpha);
    Ok(disc_gradient(backbone, &lookahead, batch)?.0)
}
