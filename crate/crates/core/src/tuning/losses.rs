use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lm::{Backbone, LabeledSequence, LmSession, PrefixBank};
use crate::numerics::{Tensor, Var};

/// Lower bound applied to the cross-label probability sum.
pub const DISC_DENOM_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood over included positions.
pub fn gen_loss(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::NoIncludedPositions);
    }
    let mut s = 0.0;
    for lp in logprobs {
        s += lp;
    }
    Ok(-s / logprobs.len() as f64)
}

/// `−Σ_j w_j log p_j`.
pub fn weighted_gen_loss(logprobs: &[f64], weights: &[f64]) -> Result<f64> {
    if logprobs.len() != weights.len() {
        return Err(Error::LengthMismatch { left: logprobs.len(), right: weights.len() });
    }
    let mut s = 0.0;
    for (lp, w) in logprobs.iter().zip(weights) {
        s += w * lp;
    }
    Ok(-s)
}

/// Generative loss plus `mu` times the (negative) discriminative score.
pub fn combined_loss(logprobs: &[f64], disc_scalar: f64, mu: f64) -> Result<f64> {
    Ok(gen_loss(logprobs)? + mu * disc_scalar)
}

/// Keeps the entries at positions the sequence does not exclude.
pub fn included(values: &[f64], seq: &LabeledSequence) -> Vec<f64> {
    values.iter().enumerate().filter(|(j, _)| !seq.is_excluded(*j)).map(|(_, v)| *v).collect()
}

/// Discriminative loss of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscLoss {
    /// `−(1/n) Σ_j L^j`, in `(−1, 0)`.
    pub scalar: f64,
    /// Per-token ratio of the true label's probability to the sum over labels, included positions only.
    pub per_token: Vec<f64>,
    /// Whether the denominator floor was hit at any position.
    pub clamped: bool,
}

/// Tape nodes for one sequence under a bound prefix bank.
pub struct SequenceVars {
    /// `log p` under the sequence's own label at included positions.
    pub logprobs: Var,
    /// Per-token discriminative ratios at included positions (if requested).
    pub disc_ratio: Option<Var>,
    /// `−mean(disc_ratio)`.
    pub disc_scalar: Option<Var>,
    pub clamped: bool,
}

/// Records the own-label log-probabilities and, if asked, the discriminative terms.
pub fn record_sequence(session: &mut LmSession<'_>, seq: &LabeledSequence, num_labels: usize, with_disc: bool) -> Result<SequenceVars> {
    if seq.label >= num_labels {
        return Err(Error::LabelOutOfRange { label: seq.label, num_labels });
    }
    let idx: Vec<usize> = (0..seq.len()).filter(|j| !seq.is_excluded(*j)).collect();
    if idx.is_empty() {
        return Err(Error::NoIncludedPositions);
    }
    let mut own = None;
    let mut probs = Vec::with_capacity(num_labels);
    for l in 0..num_labels {
        if !with_disc && l != seq.label {
            continue;
        }
        let full = session.token_logprobs(Some(l), seq)?;
        let lp = session.tape.gather(full, &idx);
        if l == seq.label {
            own = Some(lp);
        }
        if with_disc {
            probs.push(session.tape.exp(lp));
        }
    }
    let logprobs = own.expect("own label recorded");
    if !with_disc {
        return Ok(SequenceVars { logprobs, disc_ratio: None, disc_scalar: None, clamped: false });
    }
    let mut denom = probs[0];
    for p in &probs[1..] {
        denom = session.tape.add(denom, *p);
    }
    let clamped = session.tape.value(denom).data().iter().any(|v| *v <= DISC_DENOM_FLOOR);
    let denom = session.tape.clamp_min(denom, DISC_DENOM_FLOOR);
    let ratio = session.tape.div(probs[seq.label], denom);
    let mean = session.tape.mean(ratio);
    let scalar = session.tape.scale(mean, -1.0);
    Ok(SequenceVars { logprobs, disc_ratio: Some(ratio), disc_scalar: Some(scalar), clamped })
}

/// `−Σ_j w_j log p_j` on the tape with constant weights.
pub fn record_weighted_gen(session: &mut LmSession<'_>, logprobs: Var, weights: &[f64]) -> Result<Var> {
    let n = session.tape.value(logprobs).len();
    if n != weights.len() {
        return Err(Error::LengthMismatch { left: n, right: weights.len() });
    }
    let w = session.tape.input(Tensor::from_fn(&[n], |i| weights[i]));
    let d = session.tape.dot(logprobs, w);
    Ok(session.tape.scale(d, -1.0))
}

/// Uniform weights `1/n`; the weighted loss under them is exactly the plain generative loss.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    alloc::vec![1.0 / n as f64; n]
}

/// Discriminative loss of `seq` against every label of the bank.
pub fn disc_loss(backbone: &Backbone, prefixes: &PrefixBank, seq: &LabeledSequence) -> Result<DiscLoss> {
    if prefixes.num_labels() < 2 {
        return Err(Error::InvalidConfig("discriminative loss needs at least two labels".into()));
    }
    let mut s = LmSession::new(backbone, Some(prefixes));
    let vars = record_sequence(&mut s, seq, prefixes.num_labels(), true)?;
    let ratio = vars.disc_ratio.expect("requested");
    Ok(DiscLoss {
        scalar: s.tape.scalar(vars.disc_scalar.expect("requested")),
        per_token: s.tape.value(ratio).data().to_vec(),
        clamped: vars.clamped,
    })
}

/// Discriminative score from per-label token probabilities (`probs[l][j]`), for checking.
pub fn disc_from_probabilities(probs: &[Vec<f64>], label: usize) -> (f64, Vec<f64>) {
    let n = probs[label].len();
    let per_token: Vec<f64> = (0..n)
        .map(|j| {
            let mut denom = 0.0;
            for p in probs {
                denom += p[j];
            }
            probs[label][j] / denom.max(DISC_DENOM_FLOOR)
        })
        .collect();
    let mean = per_token.iter().sum::<f64>() / n as f64;
    (-mean, per_token)
}
