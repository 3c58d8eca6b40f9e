//! Tokenization, rule-based part-of-speech tagging, noun-phrase chunking
//! and phrase masking.

mod chunker;
mod lexicon;
mod mask;
mod tokenize;
mod vocab;

pub use chunker::{chunk_noun_phrases, Phrase};
pub use lexicon::{pos_tag, Lexicon, Tag, TaggedToken};
pub use mask::{mask_phrase, MaskedPhrase};
pub use tokenize::{tokenize, MAX_WORD_TOKENS};
pub use vocab::{TokenId, Vocabulary, CLS_ID, MASK_ID, PAD_ID, UNK_ID};

/// Tokenize, tag and chunk in one pass.
pub fn extract_phrases(text: &str, lexicon: &Lexicon) -> Vec<Phrase> {
    let tokens = tokenize(text);
    chunk_noun_phrases(&pos_tag(&tokens, lexicon))
}
