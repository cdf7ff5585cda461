use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Char,
    Whitespace,
}

impl Scheme {
    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            Scheme::Char => text
                .char_indices()
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
            Scheme::Whitespace => text.split_whitespace().collect(),
        }
    }

    fn joiner(&self) -> &'static str {
        match self {
            Scheme::Char => "",
            Scheme::Whitespace => " ",
        }
    }
}

/// Token ↔ id map. Ids 0 and 1 are reserved for PAD and UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            token_to_id: BTreeMap::new(),
            id_to_token: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
        }
    }
}

impl Vocab {
    /// Builds a vocabulary assigning ids from 2 upward in sorted token order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set: Vec<String> = tokens.into_iter().map(|s| s.as_ref().to_string()).collect();
        set.sort();
        set.dedup();
        let mut v = Vocab::default();
        for t in set {
            v.insert(t);
        }
        v
    }

    /// Explicit assignment, e.g. `{a: 2, b: 3}`. Ids must not collide with the
    /// reserved ones.
    pub fn from_pairs(pairs: &[(&str, u32)]) -> Result<Self> {
        let mut v = Vocab::default();
        let max = pairs.iter().map(|p| p.1).max().unwrap_or(UNK_ID);
        v.id_to_token.resize(max as usize + 1, String::new());
        for (t, id) in pairs {
            if *id <= UNK_ID {
                return Err(Error::config("vocab", format!("id {id} is reserved")));
            }
            v.token_to_id.insert(t.to_string(), *id);
            v.id_to_token[*id as usize] = t.to_string();
        }
        Ok(v)
    }

    fn insert(&mut self, token: String) -> u32 {
        if let Some(id) = self.token_to_id.get(&token) {
            return *id;
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.clone());
        self.token_to_id.insert(token, id);
        id
    }

    /// Total id space including reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    /// True when no non-reserved token exists.
    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }
}

/// Maps `text` to ids, clipped or right-padded with PAD to `seq_len`.
pub fn tokenize(text: &str, scheme: Scheme, vocab: &Vocab, seq_len: usize) -> Result<Vec<u32>> {
    if vocab.is_empty() {
        return Err(Error::config("vocab", "vocabulary is empty"));
    }
    let mut ids: Vec<u32> = scheme.split(text).into_iter().map(|t| vocab.id(t)).take(seq_len).collect();
    ids.resize(seq_len, PAD_ID);
    Ok(ids)
}

/// Inverse of [`tokenize`] for in-vocabulary input; PAD is dropped.
pub fn detokenize(ids: &[u32], scheme: Scheme, vocab: &Vocab) -> String {
    ids.iter()
        .filter(|id| **id != PAD_ID)
        .map(|id| vocab.token(*id).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(scheme.joiner())
}
