use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lm::{forward, Backbone, LabeledSequence, Layout, ModelConfig, BOS};
use crate::numerics::{self, ParameterSet, Tape, Tensor, Var};

const HEAD_INIT_STD: f64 = 0.02;

/// Sequence classifier: a trainable copy of the backbone, mean pooling over the
/// final hidden states, and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ModelConfig,
    num_labels: usize,
    params: ParameterSet,
    layout: Layout,
    head_w: usize,
    head_b: usize,
}

impl Classifier {
    pub fn from_backbone(backbone: &Backbone, num_labels: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::InvalidConfig("a classifier needs at least two labels".into()));
        }
        let d = backbone.config().d_model;
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
        let mut params = backbone.params().clone();
        params.set_trainable(true);
        params.insert("head.w", Tensor::from_fn(&[d, num_labels], |_| normal.sample(rng)), true)?;
        params.insert("head.b", Tensor::zeros(&[num_labels]), true)?;
        Self::from_params(*backbone.config(), num_labels, params)
    }

    pub fn from_params(config: ModelConfig, num_labels: usize, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::from_params(&config, &params)?;
        let head_w = params.index_of("head.w")?;
        let head_b = params.index_of("head.b")?;
        if params.tensor(head_w).shape() != [config.d_model, num_labels] || params.tensor(head_b).shape() != [num_labels] {
            return Err(Error::InvalidConfig("classifier head shape does not match the label count".into()));
        }
        Ok(Self { config, num_labels, params, layout, head_w, head_b })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Model inputs: `[BOS] ++ tokens`, truncated to the context length.
    pub fn inputs(&self, seq: &LabeledSequence) -> Vec<usize> {
        let keep = seq.tokens.len().min(self.config.max_len - 1);
        let mut inputs = Vec::with_capacity(keep + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&seq.tokens[..keep]);
        inputs
    }

    /// Log-probabilities `[L]` with the parameters bound as `w`.
    pub fn record(&self, tape: &mut Tape<'_>, w: &[Var], seq: &LabeledSequence) -> Result<Var> {
        if let Some(&token) = seq.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size: self.config.vocab_size });
        }
        let inputs = self.inputs(seq);
        let out = forward(tape, &self.config, &self.layout, w, &inputs, None);
        let pooled = tape.mean_rows(out.hidden);
        let pooled = tape.reshape(pooled, &[1, self.config.d_model]);
        let logits = tape.matmul(pooled, w[self.head_w]);
        let logits = tape.add_row(logits, w[self.head_b]);
        let lp = tape.log_softmax(logits);
        Ok(tape.reshape(lp, &[self.num_labels]))
    }

    /// Class probabilities.
    pub fn predict_proba(&self, seq: &LabeledSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape);
        let lp = self.record(&mut tape, &w, seq)?;
        let lp = tape.value(lp).data().to_vec();
        numerics::softmax_stable(&lp)
    }

    /// Most probable label (lowest index on ties).
    pub fn predict(&self, seq: &LabeledSequence) -> Result<usize> {
        let p = self.predict_proba(seq)?;
        let mut best = 0;
        for (l, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = l;
            }
        }
        Ok(best)
    }
}
