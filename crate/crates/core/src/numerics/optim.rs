use alloc::vec;
use alloc::vec::Vec;

use super::params::{Gradients, ParameterSet};

/// Adam over the flattened trainable view of a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        let n = params.flat_len();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) {
        self.t += 1;
        let g = grads.flatten();
        let mut flat = params.to_flat();
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..flat.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            flat[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
        }
        params.set_flat(&flat).expect("layout unchanged");
    }
}
