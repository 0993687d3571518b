//! Closed word-level vocabulary shared by instructions and substep phrases.
//!
//! Serialized as a JSON list of token strings; the list index is the id.

use std::collections::BTreeMap;

use crate::{ModelError, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const PAD: &str = "<pad>";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Build from a word inventory. Specials come first, then the unique
    /// words in sorted order, so the mapping is independent of input order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<String> = words
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_string)
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut tokens: Vec<String> = [BOS, EOS, SEP, PAD].iter().map(|s| s.to_string()).collect();
        let specials: Vec<String> = tokens.clone();
        tokens.extend(uniq.into_iter().filter(|w| !specials.contains(w)));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }

    pub fn sep(&self) -> u32 {
        self.index[SEP]
    }

    pub fn pad(&self) -> u32 {
        self.index[PAD]
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| ModelError::Vocab(format!("token `{token}` not in vocabulary")))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| ModelError::Vocab(format!("id {id} out of range")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("strings serialize")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let tokens: Vec<String> =
            serde_json::from_str(json).map_err(|e| ModelError::Vocab(e.to_string()))?;
        for special in [BOS, EOS, SEP, PAD] {
            if !tokens.contains(&special.to_string()) {
                return Err(ModelError::Vocab(format!("missing special token {special}")));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, index })
    }
}
