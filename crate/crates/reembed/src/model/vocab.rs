//! The fixed small vocabulary: text tokens plus special tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
/// The embedding terminator. Predicting it ends encoding; the retrieval
/// vector is read from hidden state around this position.
pub const EMB: TokenId = 2;
pub const TAG_OPEN: TokenId = 3;
pub const TAG_CLOSE: TokenId = 4;
const N_SPECIALS: usize = 5;

const SPECIAL_WORDS: [&str; N_SPECIALS] = ["<pad>", "<bos>", "<emb>", "<tag>", "</tag>"];

/// Dense token ids: specials in `0..5`, text tokens from 5 up. The embedding
/// terminator is deliberately outside the text partition so routing can
/// distinguish "stop now" from "keep reasoning".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl TokenVocab {
    pub fn new(text_tokens: &[&str]) -> Result<Self, ModelError> {
        let mut tokens: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
        for w in text_tokens {
            tokens.push(w.to_string());
        }
        let mut v = Self {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index()?;
        Ok(v)
    }

    /// Rebuild the word -> id map (needed after deserialization).
    pub fn rebuild_index(&mut self) -> Result<(), ModelError> {
        self.index.clear();
        for (i, w) in self.tokens.iter().enumerate() {
            if self.index.insert(w.clone(), i as TokenId).is_some() {
                return Err(ModelError::Config(format!("duplicate vocab word '{w}'")));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        (id as usize) >= N_SPECIALS && (id as usize) < self.tokens.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < N_SPECIALS
    }

    /// Whitespace-tokenize an in-vocabulary string.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, ModelError> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| ModelError::OutOfVocabulary(w.to_string()))
            })
            .collect()
    }

    /// Inverse of `encode` for canonically spaced strings.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The vocabulary used by the synthetic retrieval world.
    pub fn core() -> Self {
        Self::new(&CORE_WORDS).expect("core vocab is duplicate-free")
    }
}

pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const ATTR_NAMES: [&str; 3] = ["color", "shape", "size"];
/// Low-content words used to pad candidate-side text to variable lengths.
pub const FILLER_WORDS: [&str; 16] = [
    "very", "quite", "rather", "indeed", "truly", "fairly", "really", "simply", "almost",
    "nearly", "mostly", "somewhat", "plainly", "notably", "broadly", "roughly",
];

const CORE_WORDS: [&str; 49] = [
    // attributes
    "red", "blue", "green", "yellow", "circle", "square", "triangle", "star", "small", "large",
    // attribute names
    "color", "shape", "size",
    // trace structure
    "src", "op", "keep", "tgt", ";",
    // instruction words
    "task", "simple", "retrieval", "single", "double", "edit", ":", "find", "change", "to",
    "then", "describe", "the", "item", "a",
    // filler
    "very", "quite", "rather", "indeed", "truly", "fairly", "really", "simply", "almost",
    "nearly", "mostly", "somewhat", "plainly", "notably", "broadly", "roughly",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_emb_is_not_text() {
        let v = TokenVocab::core();
        for i in 0..v.size() {
            assert_eq!(v.id(v.word(i as TokenId)), Some(i as TokenId));
        }
        assert!(!v.is_text(EMB));
        assert!(v.is_special(EMB));
        assert!(v.is_text(v.id("red").unwrap()));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = TokenVocab::core();
        let s = "find red circle small";
        assert_eq!(v.decode(&v.encode(s).unwrap()), s);
    }

    #[test]
    fn out_of_vocabulary_word_errors() {
        let v = TokenVocab::core();
        assert!(matches!(
            v.encode("find purple circle"),
            Err(ModelError::OutOfVocabulary(w)) if w == "purple"
        ));
    }
}
