use alloc::vec::Vec;

use super::vocab::{EOS, SEP};
use crate::error::{Error, Result};

/// A token sequence (or a separator-joined pair) with its label.
///
/// In pair mode `tokens = first ++ [SEP] ++ second` and `first_len` records
/// where the separator sits. Positions up to and including the separator are
/// conditioning and are excluded from every loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub first_len: Option<usize>,
}

impl LabeledSequence {
    pub fn single(id: u64, tokens: Vec<usize>, label: usize) -> Self {
        Self { id, tokens, label, first_len: None }
    }

    pub fn pair(id: u64, first: &[usize], second: &[usize], label: usize) -> Self {
        let mut tokens = Vec::with_capacity(first.len() + second.len() + 1);
        tokens.extend_from_slice(first);
        tokens.push(SEP);
        tokens.extend_from_slice(second);
        Self { id, tokens, label, first_len: Some(first.len()) }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_pair(&self) -> bool {
        self.first_len.is_some()
    }

    /// Conditioning part of a pair (empty for single sequences).
    pub fn first(&self) -> &[usize] {
        match self.first_len {
            Some(f) => &self.tokens[..f],
            None => &[],
        }
    }

    /// Part of the sequence that is modelled: the whole sequence, or what follows the separator.
    pub fn second(&self) -> &[usize] {
        match self.first_len {
            Some(f) => &self.tokens[f + 1..],
            None => &self.tokens,
        }
    }

    pub fn is_excluded(&self, position: usize) -> bool {
        matches!(self.first_len, Some(f) if position <= f)
    }

    pub fn excluded_mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|j| self.is_excluded(j)).collect()
    }

    pub fn included_count(&self) -> usize {
        self.tokens.len() - self.first_len.map_or(0, |f| f + 1)
    }

    /// Copy with an end-of-sequence token appended, as used for language-model training.
    pub fn terminated(&self) -> Self {
        let mut out = self.clone();
        out.tokens.push(EOS);
        out
    }

    pub fn validate(&self, vocab_size: usize, num_labels: usize, max_len: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidSequence("empty sequence"));
        }
        if self.tokens.len() > max_len {
            return Err(Error::ContextTooLong { len: self.tokens.len(), max: max_len });
        }
        if let Some(&token) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size });
        }
        if self.label >= num_labels {
            return Err(Error::LabelOutOfRange { label: self.label, num_labels });
        }
        let seps = self.tokens.iter().filter(|&&t| t == SEP).count();
        match self.first_len {
            Some(f) => {
                if f >= self.tokens.len() || self.tokens[f] != SEP || seps != 1 {
                    return Err(Error::InvalidSequence("pair must contain exactly one separator at first_len"));
                }
            }
            None if seps != 0 => return Err(Error::InvalidSequence("separator in single sequence")),
            None => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn pair_layout_and_exclusion() {
        let s = LabeledSequence::pair(7, &[10, 11], &[12, 13, 14], 1);
        assert_eq!(s.tokens, vec![10, 11, SEP, 12, 13, 14]);
        assert_eq!(s.excluded_mask(), vec![true, true, true, false, false, false]);
        assert_eq!(s.first(), &[10, 11]);
        assert_eq!(s.second(), &[12, 13, 14]);
        assert_eq!(s.included_count(), 3);
        s.validate(64, 2, 64).unwrap();
    }

    #[test]
    fn validation_errors() {
        assert!(LabeledSequence::single(0, vec![], 0).validate(64, 2, 64).is_err());
        assert!(LabeledSequence::single(0, vec![70], 0).validate(64, 2, 64).is_err());
        assert!(LabeledSequence::single(0, vec![5], 2).validate(64, 2, 64).is_err());
        assert!(LabeledSequence::single(0, vec![5, SEP], 0).validate(64, 2, 64).is_err());
        assert!(LabeledSequence::single(0, vec![5; 65], 0).validate(64, 2, 64).is_err());
        let mut p = LabeledSequence::pair(0, &[5], &[6, SEP], 0);
        assert!(p.validate(64, 2, 64).is_err());
        p.first_len = Some(0);
        assert!(p.validate(64, 2, 64).is_err());
    }
}
