use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::textproc::Lexicon;

pub type TokenId = usize;

pub const PAD_ID: TokenId = 0;
pub const MASK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[MASK]", "[CLS]", "[UNK]"];
const PUNCTUATION: [&str; 2] = [".", ","];

/// Bijective token ↔ id map. Ids 0..=3 are the reserved specials.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials, then punctuation, then `words` (deduplicated, sorted).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut rest: Vec<String> = words
            .into_iter()
            .map(Into::into)
            .filter(|w| !RESERVED.contains(&w.as_str()) && !PUNCTUATION.contains(&w.as_str()))
            .collect();
        rest.sort();
        rest.dedup();
        let tokens: Vec<String> = RESERVED
            .iter()
            .chain(PUNCTUATION.iter())
            .map(|s| s.to_string())
            .chain(rest)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_lexicon(lexicon: &Lexicon) -> Self {
        let closed = crate::textproc::lexicon::closed_class_words().map(str::to_string);
        Self::from_words(lexicon.words().map(str::to_string).chain(closed))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_token_list(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }

    /// Restores the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        *self = Self::from_tokens(std::mem::take(&mut self.tokens));
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of an ordinary word; unknown words and special spellings map to `[UNK]`.
    pub fn id(&self, token: &str) -> TokenId {
        match self.index.get(token) {
            Some(&i) if i > UNK_ID => i,
            _ => UNK_ID,
        }
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}
