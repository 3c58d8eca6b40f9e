use serde::{Deserialize, Serialize};

use crate::textproc::{Tag, TaggedToken};

/// A noun phrase. `span` is the half-open token range in the source
/// sentence and includes a leading determiner; `words` does not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub words: Vec<String>,
    pub tags: Vec<Tag>,
    pub span: (usize, usize),
}

impl Phrase {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Length of a `DT? (JJ|VBG)* (NN|NNS)+` match starting at `start`, if any,
/// and whether it began with a determiner.
fn match_at(tagged: &[TaggedToken], start: usize) -> Option<(usize, bool)> {
    let mut i = start;
    let has_dt = tagged.get(i).is_some_and(|t| t.tag == Tag::DT);
    if has_dt {
        i += 1;
    }
    while tagged.get(i).is_some_and(|t| matches!(t.tag, Tag::JJ | Tag::VBG)) {
        i += 1;
    }
    let nouns_start = i;
    while tagged.get(i).is_some_and(|t| t.tag.is_noun()) {
        i += 1;
    }
    (i > nouns_start).then_some((i - start, has_dt))
}

/// Maximal non-overlapping matches of `DT? (JJ|VBG)* (NN|NNS)+`, scanned
/// left to right.
pub fn chunk_noun_phrases(tagged: &[TaggedToken]) -> Vec<Phrase> {
    let mut phrases = Vec::new();
    let mut i = 0;
    while i < tagged.len() {
        match match_at(tagged, i) {
            Some((len, has_dt)) => {
                let first = i + usize::from(has_dt);
                let body = &tagged[first..i + len];
                phrases.push(Phrase {
                    words: body.iter().map(|t| t.text.clone()).collect(),
                    tags: body.iter().map(|t| t.tag).collect(),
                    span: (i, i + len),
                });
                i += len;
            }
            None => i += 1,
        }
    }
    phrases
}
