//! Whitespace tokenization and the token/id table.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[SOS]", "[EOS]", "[SEP]"];

/// Default minimum corpus frequency for a word to get its own id.
pub const DEFAULT_MIN_FREQ: usize = 2;

#[inline]
pub fn is_special(id: u32) -> bool {
    id < RESERVED.len() as u32
}

/// Lowercased whitespace-separated words of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

/// Token/id table. Ids `0..5` are always `PAD, UNK, SOS, EOS, SEP`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut vocab = Vocabulary { tokens: Vec::new(), index: BTreeMap::new() };
        for tok in RESERVED {
            vocab.push(tok.to_string());
        }
        vocab
    }

    fn push(&mut self, token: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Builds a vocabulary from raw texts. Words seen fewer than `min_freq`
    /// times fall back to UNK. Ids are assigned by descending frequency,
    /// ties broken lexicographically, so the result depends only on the
    /// multiset of words.
    pub fn build<'a, I>(texts: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::new();
        for (w, _) in ranked {
            vocab.push(w);
        }
        vocab
    }

    /// Rebuilds a vocabulary from its id-ordered token list (as stored in a
    /// vocabulary file). The first five entries must be the reserved tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary { tokens: Vec::new(), index: BTreeMap::new() };
        for (i, tok) in tokens.into_iter().enumerate() {
            let tok = tok.into();
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(Error::Precondition(alloc::format!(
                    "vocabulary line {} must be {}, found {tok:?}",
                    i + 1,
                    RESERVED[i]
                )));
            }
            if vocab.index.contains_key(&tok) {
                return Err(Error::Precondition(alloc::format!("duplicate token {tok:?}")));
            }
            vocab.push(tok);
        }
        if vocab.tokens.len() < RESERVED.len() {
            return Err(Error::Precondition("vocabulary is missing reserved tokens".into()));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `word`, or UNK.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased whitespace tokens mapped to ids; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.id(&w)).collect()
    }

    /// Space-joined surface forms, dropping reserved ids other than UNK.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if is_special(id) && id != UNK {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(RESERVED[UNK as usize]));
        }
        out
    }

    /// Surface words for metric computation. Every reserved id, UNK
    /// included, is dropped so unknown words never count as matches.
    pub fn decode_words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().filter(|&&id| !is_special(id)).filter_map(|&id| self.token(id)).map(String::from).collect()
    }
}

/// Free-function form of [`Vocabulary::encode`].
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(text)
}
