use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{self, ParameterSet, Tape, Tensor, Var};

/// Hidden width of the weighting network.
pub const WEIGHT_NET_HIDDEN: usize = 100;
const INIT_STD: f64 = 0.1;

/// Scalar-to-scalar MLP `1 → H (tanh) → 1` scoring each token's discriminative
/// value; a softmax across a sequence turns the scores into token weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNet {
    params: ParameterSet,
}

impl WeightNet {
    /// Gaussian weights (σ = 0.1), zero output bias.
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("weighting network needs a hidden layer".into()));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParameterSet::new();
        params.insert("w1", Tensor::from_fn(&[1, hidden], |_| normal.sample(rng)), true)?;
        params.insert("b1", Tensor::from_fn(&[hidden], |_| normal.sample(rng)), true)?;
        params.insert("w2", Tensor::from_fn(&[hidden, 1], |_| normal.sample(rng)), true)?;
        params.insert("b2", Tensor::zeros(&[1]), true)?;
        Ok(Self { params })
    }

    /// A frozen network whose output is `value` for every input, giving uniform weights.
    pub fn constant(hidden: usize, value: f64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("weighting network needs a hidden layer".into()));
        }
        let mut params = ParameterSet::new();
        params.insert("w1", Tensor::zeros(&[1, hidden]), false)?;
        params.insert("b1", Tensor::zeros(&[hidden]), false)?;
        params.insert("w2", Tensor::zeros(&[hidden, 1]), false)?;
        params.insert("b2", Tensor::from_fn(&[1], |_| value), false)?;
        Ok(Self { params })
    }

    pub fn from_params(params: ParameterSet) -> Result<Self> {
        let h = params.get("w1")?.len();
        let ok = params.len() == 4
            && params.get("w1")?.shape() == [1, h]
            && params.get("b1")?.shape() == [h]
            && params.get("w2")?.shape() == [h, 1]
            && params.get("b2")?.shape() == [1];
        if !ok || h == 0 {
            return Err(Error::InvalidConfig("malformed weighting network tensors".into()));
        }
        Ok(Self { params })
    }

    pub fn hidden(&self) -> usize {
        self.params.tensor(0).len()
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Records `softmax_j(g(v_j))` with the network's tensors bound as `w`.
    pub fn record(&self, tape: &mut Tape<'_>, w: &[Var], values: &[f64]) -> Result<Var> {
        if values.is_empty() {
            return Err(Error::Empty("token values"));
        }
        let x = tape.input(Tensor::from_fn(&[values.len(), 1], |i| values[i]));
        let h = tape.matmul(x, w[0]);
        let h = tape.add_row(h, w[1]);
        let h = tape.tanh(h);
        let s = tape.matmul(h, w[2]);
        let s = tape.add_row(s, w[3]);
        let s = tape.reshape(s, &[values.len()]);
        Ok(tape.softmax(s))
    }

    /// Raw scores `g(v)` (no softmax).
    pub fn scores(&self, values: &[f64]) -> Vec<f64> {
        let h = self.hidden();
        let (w1, b1, w2, b2) =
            (self.params.tensor(0).data(), self.params.tensor(1).data(), self.params.tensor(2).data(), self.params.tensor(3).data()[0]);
        values
            .iter()
            .map(|&v| {
                let mut s = b2;
                for k in 0..h {
                    s += libm::tanh(v * w1[k] + b1[k]) * w2[k];
                }
                s
            })
            .collect()
    }

    /// Token weights for one sequence's discriminative values.
    pub fn weights(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.is_empty() {
            return Err(Error::Empty("token values"));
        }
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape);
        let out = self.record(&mut tape, &w, values)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Same weights computed without the tape, for cross-checking.
    pub fn weights_direct(&self, values: &[f64]) -> Result<Vec<f64>> {
        numerics::softmax_stable(&self.scores(values))
    }
}
