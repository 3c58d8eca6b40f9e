use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::textproc::{TokenId, MASK_ID};

/// A phrase with exactly one token replaced by `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedPhrase {
    pub tokens: Vec<TokenId>,
    /// The unmasked phrase, kept for the clean-phrase alignment reading and
    /// for predicting every position.
    pub original: Vec<TokenId>,
    pub mask_index: usize,
    pub target_id: TokenId,
}

impl MaskedPhrase {
    /// Masks a fixed position.
    pub fn at(phrase: &[TokenId], mask_index: usize) -> Self {
        assert!(mask_index < phrase.len(), "mask index {mask_index} out of range");
        let mut tokens = phrase.to_vec();
        let target_id = tokens[mask_index];
        tokens[mask_index] = MASK_ID;
        Self {
            tokens,
            original: phrase.to_vec(),
            mask_index,
            target_id,
        }
    }
}

/// Replaces one uniformly chosen position with `[MASK]`.
pub fn mask_phrase(phrase: &[TokenId], rng: &mut Rng) -> MaskedPhrase {
    assert!(!phrase.is_empty(), "cannot mask an empty phrase");
    MaskedPhrase::at(phrase, rng.below(phrase.len()))
}
