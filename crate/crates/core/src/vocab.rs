//! Whitespace tokenizer over a line-per-token vocabulary file.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

/// Token table. Ids are line numbers; the first five are reserved specials.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from the given words, prepending the specials.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens).expect("specials present")
    }

    /// Takes the full token list, specials included, in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::invalid(
                "vocab",
                format!("need at least {NUM_SPECIALS} reserved entries, got {}", tokens.len()),
            ));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercased whitespace tokenization wrapped in start/end tokens,
    /// truncated to `max_len − 2` words.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let budget = max_len.saturating_sub(2);
        let mut ids = Vec::with_capacity(budget.min(64) + 2);
        ids.push(START);
        ids.extend(text.split_whitespace().take(budget).map(|w| self.id(&w.to_lowercase())));
        ids.push(END);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= NUM_SPECIALS || i == MASK || i == UNK)
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}
