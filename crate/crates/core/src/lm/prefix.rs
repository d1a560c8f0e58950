use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::backbone::{self, Backbone, PrefixVars};
use super::vocab::BOS;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tape, Tensor, Var};

/// Fallback initialization scale for prefix entries.
pub const PREFIX_INIT_STD: f64 = 0.02;

/// Per-label trainable prefix keys/values over a shared frozen backbone.
///
/// Tensors are stored label-major: for each label, `key`/`value` pairs for
/// every layer (`[P, d]` each), followed by the optional infix embedding
/// (`[d]`) that replaces the separator's input embedding in pair mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixBank {
    num_labels: usize,
    num_layers: usize,
    prefix_len: usize,
    d_model: usize,
    infix: bool,
    params: ParameterSet,
}

impl PrefixBank {
    fn empty(num_labels: usize, num_layers: usize, prefix_len: usize, d_model: usize, infix: bool) -> Self {
        Self { num_labels, num_layers, prefix_len, d_model, infix, params: ParameterSet::new() }
    }

    /// Small Gaussian prefixes (σ = 0.02) for every label.
    pub fn random(backbone: &Backbone, num_labels: usize, infix: bool, rng: &mut impl Rng) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::InvalidConfig("at least one label is required".into()));
        }
        let cfg = backbone.config();
        let mut bank = Self::empty(num_labels, cfg.n_layers, cfg.prefix_len, cfg.d_model, infix);
        let normal = Normal::new(0.0, PREFIX_INIT_STD).expect("valid std");
        for l in 0..num_labels {
            for i in 0..cfg.n_layers {
                for kind in ["key", "value"] {
                    let t = Tensor::from_fn(&[cfg.prefix_len, cfg.d_model], |_| normal.sample(rng));
                    bank.params.insert(&format!("label{l}.layer{i}.{kind}"), t, true)?;
                }
            }
            if infix {
                let t = Tensor::from_fn(&[cfg.d_model], |_| normal.sample(rng));
                bank.params.insert(&format!("label{l}.infix"), t, true)?;
            }
        }
        Ok(bank)
    }

    /// Initializes each label's prefix from the backbone's own keys/values on a
    /// label-specific seed phrase. Rows beyond the phrase length keep Gaussian noise.
    /// The infix starts from the separator's token embedding.
    pub fn from_phrases(backbone: &Backbone, phrases: &[Vec<usize>], infix: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut bank = Self::random(backbone, phrases.len(), infix, rng)?;
        let cfg = *backbone.config();
        for (l, phrase) in phrases.iter().enumerate() {
            if phrase.is_empty() {
                continue;
            }
            if let Some(&token) = phrase.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::TokenOutOfRange { token, vocab_size: cfg.vocab_size });
            }
            let mut inputs = Vec::with_capacity(phrase.len() + 1);
            inputs.push(BOS);
            inputs.extend_from_slice(phrase);
            inputs.truncate(cfg.prefix_len.min(cfg.max_len));
            let rows = inputs.len();
            let mut tape = Tape::new();
            let w = backbone.params().bind(&mut tape);
            let out = backbone::forward(&mut tape, &cfg, backbone.layout(), &w, &inputs, None);
            for (i, (k, v)) in out.kv.iter().enumerate() {
                for (kind, var) in [(0, *k), (1, *v)] {
                    let src = tape.value(var).data()[..rows * cfg.d_model].to_vec();
                    let idx = bank.index(l, i, kind);
                    bank.params.tensor_mut(idx).data_mut()[..rows * cfg.d_model].copy_from_slice(&src);
                }
            }
            if infix {
                let sep = backbone.params().tensor(backbone.layout().tok_emb).row(super::vocab::SEP).to_vec();
                let idx = bank.infix_index(l).expect("infix present");
                bank.params.tensor_mut(idx).data_mut().copy_from_slice(&sep);
            }
        }
        Ok(bank)
    }

    /// Rebuilds a bank from stored tensors, checking names and shapes.
    pub fn from_params(
        num_labels: usize,
        num_layers: usize,
        prefix_len: usize,
        d_model: usize,
        infix: bool,
        mut params: ParameterSet,
    ) -> Result<Self> {
        let bank = Self::empty(num_labels, num_layers, prefix_len, d_model, infix);
        let expected = num_labels * bank.per_label();
        if params.len() != expected {
            return Err(Error::InvalidConfig(format!("prefix bank expects {expected} tensors, got {}", params.len())));
        }
        for l in 0..num_labels {
            for i in 0..num_layers {
                for (kind, name) in [(0, "key"), (1, "value")] {
                    let idx = params.index_of(&format!("label{l}.layer{i}.{name}"))?;
                    if idx != bank.index(l, i, kind) || params.tensor(idx).shape() != [prefix_len, d_model] {
                        return Err(Error::InvalidConfig(format!("bad prefix tensor label{l}.layer{i}.{name}")));
                    }
                }
            }
            if infix {
                let idx = params.index_of(&format!("label{l}.infix"))?;
                if Some(idx) != bank.infix_index(l) || params.tensor(idx).shape() != [d_model] {
                    return Err(Error::InvalidConfig(format!("bad infix tensor for label {l}")));
                }
            }
        }
        params.set_trainable(true);
        Ok(Self { params, ..bank })
    }

    fn per_label(&self) -> usize {
        2 * self.num_layers + usize::from(self.infix)
    }

    fn index(&self, label: usize, layer: usize, kind: usize) -> usize {
        label * self.per_label() + 2 * layer + kind
    }

    fn infix_index(&self, label: usize) -> Option<usize> {
        self.infix.then(|| label * self.per_label() + 2 * self.num_layers)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn has_infix(&self) -> bool {
        self.infix
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Parameter indices belonging to one label.
    pub fn label_indices(&self, label: usize) -> core::ops::Range<usize> {
        let per = self.per_label();
        label * per..(label + 1) * per
    }

    /// Overwrites label `dst`'s tensors with those of label `src`.
    pub fn copy_label(&mut self, src: usize, dst: usize) {
        for (s, d) in self.label_indices(src).zip(self.label_indices(dst)) {
            let t = self.params.tensor(s).clone();
            *self.params.tensor_mut(d) = t;
        }
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_labels {
            return Err(Error::LabelOutOfRange { label, num_labels: self.num_labels });
        }
        Ok(())
    }

    pub(crate) fn vars(&self, bound: &[Var], label: usize) -> PrefixVars {
        let layers = (0..self.num_layers).map(|i| (bound[self.index(label, i, 0)], bound[self.index(label, i, 1)])).collect();
        PrefixVars { layers, infix: self.infix_index(label).map(|i| bound[i]) }
    }
}
