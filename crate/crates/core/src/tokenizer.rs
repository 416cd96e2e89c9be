//! Lower-cased word-level tokenizer with a reserved unknown-word id.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_ID: u32 = 0;
pub const UNK_TOKEN: &str = "[unk]";

/// Words that must be present for the pseudo-token prompt.
pub const PROMPT_WORDS: [&str; 3] = ["a", "photo", "of"];

/// A non-empty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size }),
            None => Ok(()),
        }
    }
}

/// Output of [`Vocab::tokenize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: TokenSequence,
    /// Set when the input had more words than `max_len`.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", from = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::from_list(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Splits on anything that is not alphanumeric and lower-cases.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl Vocab {
    /// Builds a vocabulary from explicit tokens; id 0 is always the unknown token.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = vec![UNK_TOKEN.to_string()];
        for t in tokens {
            let t = t.into();
            if t != UNK_TOKEN && !list.contains(&t) {
                list.push(t);
            }
        }
        Self::from_list(list)
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    /// Most frequent words first (ties alphabetical), capped at `max_size`
    /// entries including the unknown token. Prompt words are always kept.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < 1 + PROMPT_WORDS.len() {
            return Err(Error::Config(format!("vocabulary size {max_size} too small")));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut list: Vec<String> = vec![UNK_TOKEN.to_string()];
        list.extend(PROMPT_WORDS.iter().map(|w| w.to_string()));
        for (w, _) in ranked {
            if list.len() >= max_size {
                break;
            }
            if !list.contains(&w) {
                list.push(w);
            }
        }
        Ok(Self::from_list(list))
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

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Tokenized> {
        let mut ids = Vec::new();
        let mut truncated = false;
        for w in words(text) {
            if ids.len() == max_len {
                truncated = true;
                break;
            }
            ids.push(self.id(&w));
        }
        Ok(Tokenized { tokens: TokenSequence::new(ids)?, truncated })
    }

    pub fn prompt(&self) -> TokenSequence {
        TokenSequence { ids: PROMPT_WORDS.iter().map(|w| self.id(w)).collect() }
    }
}
