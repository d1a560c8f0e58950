use alloc::format;

use crate::error::{Error, Result};

/// Shape of the decoder-only backbone and its prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of prefix key/value positions per layer.
    pub prefix_len: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 64, d_model: 64, n_layers: 2, n_heads: 4, prefix_len: 8, max_len: 64 }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < super::vocab::RESERVED {
            return Err(Error::InvalidConfig(format!("vocab_size {} below reserved tokens", self.vocab_size)));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.prefix_len == 0 {
            return Err(Error::InvalidConfig("prefix_len must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be at least 1".into()));
        }
        Ok(())
    }
}
