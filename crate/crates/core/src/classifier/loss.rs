use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// `q_l = 1(l = y)(1 − ε) + ε/L`.
pub fn smoothed_targets(label: usize, num_labels: usize, epsilon: f64) -> Result<Vec<f64>> {
    if label >= num_labels {
        return Err(Error::LabelOutOfRange { label, num_labels });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig("label smoothing must lie in [0, 1)".into()));
    }
    let mut q = vec![epsilon / num_labels as f64; num_labels];
    q[label] += 1.0 - epsilon;
    Ok(q)
}

/// Value of the classification loss and whether any probability hit the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLoss {
    pub value: f64,
    pub floored: bool,
}

/// `−Σ q_l log p_l − λ Σ z̄_l log(p_l / z̄_l)`; terms with `z̄_l = 0` contribute nothing.
pub fn class_loss(p: &[f64], q: &[f64], z_bar: &[f64], lambda: f64) -> Result<ClassLoss> {
    if p.len() != q.len() || p.len() != z_bar.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len().min(z_bar.len()) });
    }
    let mut floored = false;
    let mut ce = 0.0;
    let mut reg = 0.0;
    for ((&pl, &ql), &zl) in p.iter().zip(q).zip(z_bar) {
        if pl < PROB_FLOOR {
            floored = true;
        }
        let lp = libm::log(pl.max(PROB_FLOOR));
        ce -= ql * lp;
        if zl > 0.0 {
            reg -= zl * (lp - libm::log(zl));
        }
    }
    Ok(ClassLoss { value: ce + lambda * reg, floored })
}

/// `KL(a ∥ b) = Σ a_l log(a_l / b_l)`.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * libm::log(x / y)).sum()
}

/// Moving average of one sample's predictions with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub z_hat: Vec<f64>,
    pub z_bar: Vec<f64>,
    pub t: u32,
}

impl EnsembleState {
    pub fn new(num_labels: usize) -> Self {
        Self { z_hat: vec![0.0; num_labels], z_bar: vec![0.0; num_labels], t: 0 }
    }

    pub fn is_fresh(&self) -> bool {
        self.t == 0
    }

    /// `ẑ ← γẑ + (1−γ)p`, `z̄ ← ẑ / (1 − γ^t)`.
    pub fn update(&mut self, p: &[f64], gamma: f64) {
        self.t += 1;
        let correction = 1.0 - libm::pow(gamma, self.t as f64);
        for ((h, b), &pl) in self.z_hat.iter_mut().zip(&mut self.z_bar).zip(p) {
            *h = gamma * *h + (1.0 - gamma) * pl;
            *b = *h / correction;
        }
    }
}

/// Indices of samples whose ensembled probability of their own label exceeds `delta`.
/// Samples whose state has never been updated are kept.
pub fn filter_retained(labels: &[usize], states: &[EnsembleState], delta: f64) -> Vec<usize> {
    labels
        .iter()
        .zip(states)
        .enumerate()
        .filter(|(_, (&y, s))| s.is_fresh() || s.z_bar[y] > delta)
        .map(|(i, _)| i)
        .collect()
}
