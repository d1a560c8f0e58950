use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::vocab::BOS;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Parameter indices of the transformer tensors inside a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub(crate) tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerLayout>,
    lnf_gain: usize,
    lnf_bias: usize,
}

impl Layout {
    pub(crate) fn from_params(config: &ModelConfig, params: &ParameterSet) -> Result<Self> {
        let layers = (0..config.n_layers)
            .map(|i| {
                let idx = |s: &str| params.index_of(&format!("layer{i}.{s}"));
                Ok(LayerLayout {
                    ln1_gain: idx("ln1.gain")?,
                    ln1_bias: idx("ln1.bias")?,
                    wq: idx("attn.wq")?,
                    wk: idx("attn.wk")?,
                    wv: idx("attn.wv")?,
                    wo: idx("attn.wo")?,
                    ln2_gain: idx("ln2.gain")?,
                    ln2_bias: idx("ln2.bias")?,
                    w1: idx("ffn.w1")?,
                    b1: idx("ffn.b1")?,
                    w2: idx("ffn.w2")?,
                    b2: idx("ffn.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = Self {
            tok_emb: params.index_of("tok_emb")?,
            pos_emb: params.index_of("pos_emb")?,
            layers,
            lnf_gain: params.index_of("lnf.gain")?,
            lnf_bias: params.index_of("lnf.bias")?,
        };
        let expect = |i: usize, shape: &[usize]| -> Result<()> {
            if params.tensor(i).shape() != shape {
                return Err(Error::InvalidConfig(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    params.iter().nth(i).map(|p| p.name.as_str()).unwrap_or("?"),
                    params.tensor(i).shape(),
                    shape
                )));
            }
            Ok(())
        };
        let (v, d, f) = (config.vocab_size, config.d_model, config.ffn_dim());
        expect(layout.tok_emb, &[v, d])?;
        expect(layout.pos_emb, &[config.max_len, d])?;
        for l in &layout.layers {
            expect(l.wq, &[d, d])?;
            expect(l.wk, &[d, d])?;
            expect(l.wv, &[d, d])?;
            expect(l.wo, &[d, d])?;
            expect(l.w1, &[d, f])?;
            expect(l.w2, &[f, d])?;
        }
        Ok(layout)
    }
}

/// Label-specific attention state prepended at each layer.
pub(crate) struct PrefixVars {
    pub(crate) layers: Vec<(Var, Var)>,
    pub(crate) infix: Option<Var>,
}

pub(crate) struct ForwardOut {
    /// Final normalized hidden states `[n, d]`.
    pub(crate) hidden: Var,
    /// Per-layer projected keys and values of the input positions.
    pub(crate) kv: Vec<(Var, Var)>,
}

/// Pre-norm decoder pass over `inputs`, with optional per-layer prefix keys/values.
pub(crate) fn forward<'a>(
    tape: &mut Tape<'a>,
    config: &ModelConfig,
    layout: &Layout,
    w: &[Var],
    inputs: &[usize],
    prefix: Option<&PrefixVars>,
) -> ForwardOut {
    let n = inputs.len();
    let dh = config.head_dim();
    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
    let positions: Vec<usize> = (0..n).collect();

    let mut x = tape.embed(w[layout.tok_emb], inputs);
    if let Some(infix) = prefix.and_then(|p| p.infix) {
        for (pos, &tok) in inputs.iter().enumerate() {
            if tok == super::vocab::SEP {
                x = tape.replace_row(x, pos, infix);
            }
        }
    }
    let pos = tape.embed(w[layout.pos_emb], &positions);
    x = tape.add(x, pos);

    let mut kv = Vec::with_capacity(layout.layers.len());
    for (li, l) in layout.layers.iter().enumerate() {
        let h = tape.layer_norm(x, w[l.ln1_gain], w[l.ln1_bias]);
        let q = tape.matmul(h, w[l.wq]);
        let k_in = tape.matmul(h, w[l.wk]);
        let v_in = tape.matmul(h, w[l.wv]);
        kv.push((k_in, v_in));
        let (k, v, offset) = match prefix {
            Some(p) if !p.layers.is_empty() => {
                let (pk, pv) = p.layers[li];
                let plen = tape.value(pk).shape()[0];
                (tape.concat_rows(pk, k_in), tape.concat_rows(pv, v_in), plen)
            }
            _ => (k_in, v_in, 0),
        };
        let mut heads = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.causal_softmax(scores, offset);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let o = tape.matmul(merged, w[l.wo]);
        x = tape.add(x, o);

        let h = tape.layer_norm(x, w[l.ln2_gain], w[l.ln2_bias]);
        let f = tape.matmul(h, w[l.w1]);
        let f = tape.add_row(f, w[l.b1]);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w[l.w2]);
        let f = tape.add_row(f, w[l.b2]);
        x = tape.add(x, f);
    }
    let hidden = tape.layer_norm(x, w[layout.lnf_gain], w[layout.lnf_bias]);
    ForwardOut { hidden, kv }
}

/// Output logits `[n, V]` from hidden states, tied to the token embeddings.
pub(crate) fn output_logits(tape: &mut Tape<'_>, layout: &Layout, w: &[Var], hidden: Var) -> Var {
    tape.matmul_t(hidden, w[layout.tok_emb])
}

/// Model inputs for scoring `tokens`: `[BOS] ++ tokens[..n-1]`.
pub(crate) fn shifted_inputs(tokens: &[usize]) -> Vec<usize> {
    let mut inputs = Vec::with_capacity(tokens.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
    inputs
}

/// Frozen transformer weights shared by every label's generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: ModelConfig,
    params: ParameterSet,
    layout: Layout,
}

impl Backbone {
    /// Seeded initialization: Gaussian weights (σ = 0.02), unit norm gains, zero biases. All tensors frozen.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    /// Like [`Backbone::init`] with a custom weight scale; larger scales give
    /// sharper distributions, which is what gradient checks want.
    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|_| Error::InvalidConfig(format!("bad init std {std}")))?;
        let mut gauss = |shape: &[usize]| Tensor::from_fn(shape, |_| normal.sample(&mut rng));
        let (v, d, f) = (config.vocab_size, config.d_model, config.ffn_dim());
        let ones = |n: usize| Tensor::from_fn(&[n], |_| 1.0);
        let mut params = ParameterSet::new();
        params.insert("tok_emb", gauss(&[v, d]), false)?;
        params.insert("pos_emb", gauss(&[config.max_len, d]), false)?;
        for i in 0..config.n_layers {
            let name = |s: &str| format!("layer{i}.{s}");
            params.insert(&name("ln1.gain"), ones(d), false)?;
            params.insert(&name("ln1.bias"), Tensor::zeros(&[d]), false)?;
            params.insert(&name("attn.wq"), gauss(&[d, d]), false)?;
            params.insert(&name("attn.wk"), gauss(&[d, d]), false)?;
            params.insert(&name("attn.wv"), gauss(&[d, d]), false)?;
            params.insert(&name("attn.wo"), gauss(&[d, d]), false)?;
            params.insert(&name("ln2.gain"), ones(d), false)?;
            params.insert(&name("ln2.bias"), Tensor::zeros(&[d]), false)?;
            params.insert(&name("ffn.w1"), gauss(&[d, f]), false)?;
            params.insert(&name("ffn.b1"), Tensor::zeros(&[f]), false)?;
            params.insert(&name("ffn.w2"), gauss(&[f, d]), false)?;
            params.insert(&name("ffn.b2"), Tensor::zeros(&[d]), false)?;
        }
        params.insert("lnf.gain", ones(d), false)?;
        params.insert("lnf.bias", Tensor::zeros(&[d]), false)?;
        Self::from_params(config, params)
    }

    /// Wraps existing tensors (e.g. loaded from a checkpoint); every tensor is frozen.
    pub fn from_params(config: ModelConfig, mut params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::from_params(&config, &params)?;
        params.set_trainable(false);
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Mutable access to the weights. Pretraining unfreezes and re-freezes
    /// them; tensor shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }
}
