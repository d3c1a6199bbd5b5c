//! Closed token vocabulary with reserved special symbols.
//!
//! The vocabulary is built from the training corpus; anything unseen maps to
//! the unknown symbol. Special symbols occupy fixed low indices so model
//! configs can refer to them without a lookup.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const BOS_TOKEN: &str = "[BOS]";
pub const EOS_TOKEN: &str = "[EOS]";
pub const MASK_TOKEN: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const MASK_ID: usize = 4;

const SPECIALS: [&str; 5] = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, MASK_TOKEN];

/// Token string <-> index mapping. Index 0..5 are the special symbols; the
/// remainder is the sorted set of corpus tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build a vocabulary from an iterator of corpus tokens.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus_tokens: I) -> Vocab {
        let unique: BTreeSet<&str> = corpus_tokens
            .into_iter()
            .filter(|t| !SPECIALS.contains(t))
            .collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(unique.into_iter().map(|s| s.to_string()));
        Vocab::from_tokens(tokens)
    }

    /// Reconstruct a vocabulary from its stored token list (e.g. a checkpoint).
    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Index of `token`, falling back to the unknown symbol.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Encode an instance token sequence as `[BOS] tokens [EOS]` indices.
    pub fn encode_framed(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS_ID);
        ids.extend(tokens.iter().map(|t| self.id(t)));
        ids.push(EOS_ID);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_keep_fixed_indices() {
        let v = Vocab::build(["banana", "apple"]);
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id(MASK_TOKEN), MASK_ID);
        assert_eq!(v.token(BOS_ID), BOS_TOKEN);
    }

    #[test]
    fn corpus_tokens_are_sorted_and_deduplicated() {
        let v = Vocab::build(["b", "a", "b", "a", "c"]);
        assert_eq!(v.len(), 5 + 3);
        assert_eq!(v.token(5), "a");
        assert_eq!(v.token(6), "b");
        assert_eq!(v.token(7), "c");
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocab::build(["a"]);
        assert_eq!(v.id("zzz"), UNK_ID);
    }

    #[test]
    fn mask_token_in_corpus_is_not_duplicated() {
        let v = Vocab::build(["a", MASK_TOKEN, "b"]);
        assert_eq!(v.id(MASK_TOKEN), MASK_ID);
        assert_eq!(v.len(), 5 + 2);
    }

    #[test]
    fn framed_encoding_adds_bos_and_eos() {
        let v = Vocab::build(["hi"]);
        let ids = v.encode_framed(&["hi".to_string(), "zzz".to_string()]);
        assert_eq!(ids, vec![BOS_ID, v.id("hi"), UNK_ID, EOS_ID]);
    }
}
