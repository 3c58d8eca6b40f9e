use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed part-of-speech tag set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    DT,
    JJ,
    NN,
    NNS,
    VBG,
    VB,
    IN,
    CC,
    PRP,
    OTHER,
}

impl Tag {
    pub fn is_noun(self) -> bool {
        matches!(self, Tag::NN | Tag::NNS)
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "DT" => Tag::DT,
            "JJ" => Tag::JJ,
            "NN" => Tag::NN,
            "NNS" => Tag::NNS,
            "VBG" => Tag::VBG,
            "VB" => Tag::VB,
            "IN" => Tag::IN,
            "CC" => Tag::CC,
            "PRP" => Tag::PRP,
            "OTHER" => Tag::OTHER,
            other => return Err(Error::Argument(format!("unknown tag {other:?}"))),
        })
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedToken {
    pub text: String,
    pub tag: Tag,
}

const CLOSED_CLASS: &[(&str, Tag)] = &[
    ("the", Tag::DT),
    ("a", Tag::DT),
    ("an", Tag::DT),
    ("this", Tag::DT),
    ("that", Tag::DT),
    ("these", Tag::DT),
    ("those", Tag::DT),
    ("is", Tag::VB),
    ("are", Tag::VB),
    ("was", Tag::VB),
    ("were", Tag::VB),
    ("and", Tag::CC),
    ("or", Tag::CC),
    ("but", Tag::CC),
    ("in", Tag::IN),
    ("on", Tag::IN),
    ("with", Tag::IN),
    ("of", Tag::IN),
    ("at", Tag::IN),
    ("over", Tag::IN),
    ("under", Tag::IN),
    ("he", Tag::PRP),
    ("she", Tag::PRP),
    ("they", Tag::PRP),
    ("his", Tag::PRP),
    ("her", Tag::PRP),
    ("their", Tag::PRP),
];

pub(crate) fn closed_class_words() -> impl Iterator<Item = &'static str> {
    CLOSED_CLASS.iter().map(|(w, _)| *w)
}

/// Open-class word → tag table, loaded from `word<TAB>tag` lines.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: HashMap<String, Tag>,
}

const BUILTIN: &str = include_str!("../../data/lexicon.tsv");

impl Lexicon {
    /// The lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("built-in lexicon is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let line_offset = offset;
            offset += line.len() as u64 + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (word, tag) = trimmed
                .split_once('\t')
                .ok_or_else(|| Error::format(line_offset, format!("expected word<TAB>tag, got {trimmed:?}")))?;
            let tag: Tag = tag
                .trim()
                .parse()
                .map_err(|e: Error| Error::format(line_offset, e.to_string()))?;
            entries.insert(word.trim().to_lowercase(), tag);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, word: &str) -> Option<Tag> {
        self.entries.get(word).copied()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn tag_word(word: &str, lexicon: &Lexicon) -> Tag {
    if let Some(&(_, tag)) = CLOSED_CLASS.iter().find(|(w, _)| *w == word) {
        return tag;
    }
    if let Some(tag) = lexicon.get(word) {
        return tag;
    }
    if !word.chars().any(char::is_alphabetic) {
        return Tag::OTHER;
    }
    if word.len() > 3 && word.ends_with("ing") {
        return Tag::VBG;
    }
    Tag::NN
}

/// Closed-class table first, then the lexicon; unknown `-ing` words are
/// VBG, other unknown words NN, tokens without letters OTHER.
pub fn pos_tag<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Vec<TaggedToken> {
    tokens
        .iter()
        .map(|t| {
            let text = t.as_ref().to_lowercase();
            let tag = tag_word(&text, lexicon);
            TaggedToken { text, tag }
        })
        .collect()
}
