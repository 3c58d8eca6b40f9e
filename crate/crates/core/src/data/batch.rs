use std::collections::BTreeSet;

use crate::data::{Dataset, PersonRecord, Slot};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::textproc::{extract_phrases, mask_phrase, tokenize, Lexicon, MaskedPhrase, Phrase, TokenId, Vocabulary};

/// A noun phrase of a caption, its masked variant and the attribute slot it names.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseSample {
    pub phrase: Phrase,
    pub masked: MaskedPhrase,
    pub slot: Option<Slot>,
}

/// One record prepared for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub record: usize,
    pub identity: usize,
    /// `L_I × patch_pixels`.
    pub image: Tensor,
    pub text: Vec<TokenId>,
    pub phrases: Vec<PhraseSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn identities(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.identity).collect()
    }
}

/// Caption ids and phrase extraction with one random mask per phrase.
pub fn prepare_example(
    ds: &Dataset,
    index: usize,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    rng: &mut Rng,
) -> Result<Example> {
    let record: &PersonRecord = ds
        .records
        .get(index)
        .ok_or_else(|| Error::Argument(format!("record {index} out of {}", ds.records.len())))?;
    let text = vocab.encode(&tokenize(&record.caption));
    let phrases = extract_phrases(&record.caption, lexicon)
        .into_iter()
        .map(|phrase| {
            let ids = vocab.encode(&phrase.words);
            PhraseSample {
                masked: mask_phrase(&ids, rng),
                slot: record.phrase_slot(&phrase.words),
                phrase,
            }
        })
        .collect();
    let n = ds.patch_grid.0 * ds.patch_grid.1;
    Ok(Example {
        record: index,
        identity: record.identity,
        image: record.image.clone().reshape(&[n, ds.patch_pixels])?,
        text,
        phrases,
    })
}

/// Shuffles `indices` and packs them greedily into identity-disjoint batches
/// of at most `batch_size`; every index lands in exactly one batch.
pub fn make_batches(
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    let n_ids = indices
        .iter()
        .map(|&i| ds.records.get(i).map(|r| r.identity))
        .collect::<Option<BTreeSet<_>>>()
        .ok_or_else(|| Error::Argument("batch index out of range".into()))?
        .len();
    if batch_size == 0 || batch_size > n_ids {
        return Err(Error::Config(format!(
            "batch_size {batch_size} must lie in 1..={n_ids} (distinct identities)"
        )));
    }
    let mut pending = indices.to_vec();
    rng.shuffle(&mut pending);
    let mut groups = Vec::new();
    while !pending.is_empty() {
        let mut used = BTreeSet::new();
        let mut group = Vec::with_capacity(batch_size);
        pending.retain(|&i| {
            if group.len() < batch_size && used.insert(ds.records[i].identity) {
                group.push(i);
                false
            } else {
                true
            }
        });
        groups.push(group);
    }
    groups
        .into_iter()
        .map(|g| {
            let examples = g
                .into_iter()
                .map(|i| prepare_example(ds, i, vocab, lexicon, rng))
                .collect::<Result<_>>()?;
            Ok(Batch { examples })
        })
        .collect()
}
