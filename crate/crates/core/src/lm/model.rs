use alloc::vec::Vec;

use super::backbone::{self, Backbone};
use super::prefix::PrefixBank;
use super::sequence::LabeledSequence;
use crate::error::{Error, Result};
use crate::numerics::{self, Tape, Var};

/// A tape with the backbone (and optionally a prefix bank) bound once, so
/// several forward passes under different labels share the same leaves.
pub struct LmSession<'a> {
    pub tape: Tape<'a>,
    backbone: &'a Backbone,
    weights: Vec<Var>,
    bank: Option<(&'a PrefixBank, Vec<Var>)>,
}

impl<'a> LmSession<'a> {
    pub fn new(backbone: &'a Backbone, bank: Option<&'a PrefixBank>) -> Self {
        let mut tape = Tape::new();
        let weights = backbone.params().bind(&mut tape);
        let bank = bank.map(|b| {
            let vars = b.params().bind(&mut tape);
            (b, vars)
        });
        Self { tape, backbone, weights, bank }
    }

    fn check_inputs(&self, inputs: &[usize]) -> Result<()> {
        let cfg = self.backbone.config();
        if inputs.len() > cfg.max_len {
            return Err(Error::ContextTooLong { len: inputs.len(), max: cfg.max_len });
        }
        if let Some(&token) = inputs.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size: cfg.vocab_size });
        }
        Ok(())
    }

    /// Logits `[n, V]` for raw model inputs. `label = None` runs the bare backbone.
    pub fn logits(&mut self, label: Option<usize>, inputs: &[usize]) -> Result<Var> {
        self.check_inputs(inputs)?;
        let prefix = match (label, &self.bank) {
            (Some(l), Some((bank, vars))) => {
                bank.check_label(l)?;
                Some(bank.vars(vars, l))
            }
            (Some(l), None) => return Err(Error::LabelOutOfRange { label: l, num_labels: 0 }),
            (None, _) => None,
        };
        let cfg = *self.backbone.config();
        let layout = self.backbone.layout();
        let out = backbone::forward(&mut self.tape, &cfg, layout, &self.weights, inputs, prefix.as_ref());
        Ok(backbone::output_logits(&mut self.tape, layout, &self.weights, out.hidden))
    }

    /// Vector `[n]` of `log p(x_j | x_<j)` for every position of `seq`.
    pub fn token_logprobs(&mut self, label: Option<usize>, seq: &LabeledSequence) -> Result<Var> {
        if seq.tokens.is_empty() {
            return Err(Error::InvalidSequence("empty sequence"));
        }
        let inputs = backbone::shifted_inputs(&seq.tokens);
        let logits = self.logits(label, &inputs)?;
        let ls = self.tape.log_softmax(logits);
        let v = self.backbone.config().vocab_size;
        let flat: Vec<usize> = seq.tokens.iter().enumerate().map(|(j, &t)| j * v + t).collect();
        Ok(self.tape.gather(ls, &flat))
    }
}

fn context_inputs(backbone: &Backbone, context: &[usize]) -> Result<Vec<usize>> {
    let max = backbone.config().max_len;
    if context.len() >= max {
        return Err(Error::ContextTooLong { len: context.len(), max: max - 1 });
    }
    let mut inputs = Vec::with_capacity(context.len() + 1);
    inputs.push(super::vocab::BOS);
    inputs.extend_from_slice(context);
    Ok(inputs)
}

/// Logits of the token following `context` (conditioned on `label`'s prefix when a bank is given).
pub fn next_token_logits(
    backbone: &Backbone,
    prefixes: Option<&PrefixBank>,
    label: Option<usize>,
    context: &[usize],
) -> Result<Vec<f64>> {
    let inputs = context_inputs(backbone, context)?;
    let mut s = LmSession::new(backbone, prefixes);
    let logits = s.logits(label, &inputs)?;
    let t = s.tape.value(logits);
    Ok(t.row(t.rows() - 1).to_vec())
}

/// `p(· | context)` under `label`'s prefix.
pub fn next_token_distribution(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    label: usize,
    context: &[usize],
) -> Result<Vec<f64>> {
    prefixes.check_label(label)?;
    let logits = next_token_logits(backbone, Some(prefixes), Some(label), context)?;
    numerics::softmax_stable(&logits)
}

/// Per-position log-probabilities of `seq` under `label`'s prefix. Positions
/// flagged by [`LabeledSequence::is_excluded`] are still scored; losses skip them.
pub fn sequence_token_logprobs(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    label: usize,
    seq: &LabeledSequence,
) -> Result<Vec<f64>> {
    let mut s = LmSession::new(backbone, Some(prefixes));
    let v = s.token_logprobs(Some(label), seq)?;
    Ok(s.tape.value(v).data().to_vec())
}

/// Same as [`sequence_token_logprobs`] for the bare backbone.
pub fn backbone_token_logprobs(backbone: &Backbone, seq: &LabeledSequence) -> Result<Vec<f64>> {
    let mut s = LmSession::new(backbone, None);
    let v = s.token_logprobs(None, seq)?;
    Ok(s.tape.value(v).data().to_vec())
}
