use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// Number of reserved indices at the start of every vocabulary.
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Dense token table whose first four entries are the reserved tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED {
            return Err(Error::InvalidConfig(format!("vocabulary needs at least {RESERVED} tokens")));
        }
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            if tokens[i] != *name {
                return Err(Error::InvalidConfig(format!("token {i} must be {name}")));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by `t4`, `t5`, ... up to `size - 1`.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < RESERVED {
            return Err(Error::InvalidConfig(format!("vocabulary needs at least {RESERVED} tokens")));
        }
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend((RESERVED..size).map(|i| format!("t{i}")));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_vocabulary_has_reserved_prefix() {
        let v = Vocabulary::synthetic(64).unwrap();
        assert_eq!(v.len(), 64);
        assert_eq!(v.token(EOS), Some("<eos>"));
        assert_eq!(v.lookup("t63"), Some(63));
        assert_eq!(v.lookup("t64"), None);
    }

    #[test]
    fn too_small_or_duplicate_is_rejected() {
        assert!(Vocabulary::synthetic(3).is_err());
        let mut toks: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        toks.push("a".into());
        toks.push("a".into());
        assert!(Vocabulary::new(toks).is_err());
    }
}
