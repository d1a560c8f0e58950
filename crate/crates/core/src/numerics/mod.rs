//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod fd;
mod optim;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use optim::Adam;
pub use fd::{finite_difference_oracle, finite_difference_vec, relative_error};
pub use params::{Gradients, Parameter, ParameterSet};
pub use tape::{backward_gradients, Adjoints, Tape, Var};
pub use tensor::Tensor;

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Max-shifted softmax of a logit vector.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

/// `log softmax` of a logit vector.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let lse = kernels::log_sum_exp(logits);
    Ok(logits.iter().map(|z| z - lse).collect())
}
