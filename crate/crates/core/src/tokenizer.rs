//! Word-level tokenizer over a closed vocabulary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Token → id map. The four reserved tokens always hold ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let token_to_id = [(PAD, PAD_ID), (SOS, SOS_ID), (EOS, EOS_ID), (UNK, UNK_ID)]
            .into_iter()
            .map(|(t, i)| (t.to_string(), i))
            .collect();
        Self { token_to_id }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from words, assigning ids in sorted word order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::default();
        let mut sorted: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .collect();
        sorted.sort();
        sorted.dedup();
        for w in sorted {
            v.push(&w);
        }
        v
    }

    fn push(&mut self, word: &str) {
        let next = self.token_to_id.len();
        self.token_to_id.entry(word.to_string()).or_insert(next);
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_to_id
            .iter()
            .find(|(_, v)| **v == id)
            .map(|(k, _)| k.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        for (t, i) in [(PAD, PAD_ID), (SOS, SOS_ID), (EOS, EOS_ID), (UNK, UNK_ID)] {
            if self.id(t) != Some(i) {
                return Err(Error::Invalid(format!("vocabulary must map {t} to {i}")));
            }
        }
        let mut ids: Vec<usize> = self.token_to_id.values().copied().collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(k, &i)| k != i) {
            return Err(Error::Invalid("vocabulary ids must be 0..len".into()));
        }
        Ok(())
    }
}

/// `[SOS] t1 .. tn [EOS]`, no padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the EOS token.
    pub fn eos_index(&self) -> usize {
        self.ids.len() - 1
    }
}

pub fn normalize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect()
}

/// Lowercases, splits on whitespace, maps words to ids (UNK when unknown)
/// and wraps with SOS/EOS, truncating so the result fits in `max_len`.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let words = normalize(caption);
    if words.is_empty() {
        return Err(Error::EmptyCaption);
    }
    if max_len < 3 {
        return Err(Error::Invalid(format!("max_len {max_len} leaves no room for words")));
    }
    let mut ids = Vec::with_capacity(words.len().min(max_len - 2) + 2);
    ids.push(SOS_ID);
    ids.extend(
        words
            .iter()
            .take(max_len - 2)
            .map(|w| vocab.id(w).unwrap_or(UNK_ID)),
    );
    ids.push(EOS_ID);
    Ok(TokenSequence { ids })
}
