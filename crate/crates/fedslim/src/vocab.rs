//! Whitespace word vocabulary.
//!
//! The pipeline operates on closed task worlds, so a word-level vocabulary
//! is exact: every surface form the tasks can produce is a token. Unknown
//! words map to `[unk]` rather than failing, which keeps the tokenizer
//! total over arbitrary strings coming back from a generation backend.

use crate::error::{Error, Result};
use std::collections::HashMap;

pub const BOS: &str = "[bos]";
pub const EOS: &str = "[eos]";
pub const SEP: &str = "[sep]";
pub const UNK: &str = "[unk]";

/// The four control tokens, in their fixed id order (0..4).
pub const SPECIALS: [&str; 4] = [BOS, EOS, SEP, UNK];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from a bag of words: specials first, then the deduplicated
    /// words in sorted order. Construction is a pure function of the word
    /// set, so two parties deriving a vocabulary from the same task world
    /// get identical ids.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut uniq: Vec<String> = words
            .into_iter()
            .map(Into::into)
            .filter(|w| !w.is_empty() && !SPECIALS.contains(&w.as_str()))
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(uniq);
        Self::from_tokens(tokens).expect("construction cannot produce duplicates")
    }

    /// Rebuild from an explicit token list (checkpoint headers store one).
    /// The list must start with the four control tokens and contain no
    /// duplicates, since ids are positions in this list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Data(format!(
                "vocab: {} tokens, need at least the {} control tokens",
                tokens.len(),
                SPECIALS.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Data(format!(
                    "vocab: token {i} is {:?}, expected control token {s:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("vocab: duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn bos(&self) -> u32 {
        0
    }
    pub fn eos(&self) -> u32 {
        1
    }
    pub fn sep(&self) -> u32 {
        2
    }
    pub fn unk(&self) -> u32 {
        3
    }

    /// Ids of all non-control tokens, i.e. the candidate set a sampled
    /// replacement token is drawn from.
    pub fn content_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (SPECIALS.len() as u32)..(self.tokens.len() as u32)
    }

    /// Whitespace-split encode; words outside the vocabulary become `[unk]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or_else(|| self.unk()))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace normalization.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        words.join(" ")
    }
}
