use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CaptionRecord;
use super::Split;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Word-level vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

impl Vocab {
    /// Builds from non-reserved words in id order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let all: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_all(all)
    }

    fn from_all(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words.iter().zip(RESERVED).any(|(w, r)| w != r) {
            return Err(Error::Data(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Non-reserved entries.
    pub fn content_len(&self) -> usize {
        self.words.len() - RESERVED.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Words for `ids`, skipping the reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .map(|&i| self.word(i).to_string())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            words: self.words.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::from_all(file.words)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Training-split words seen at least `min_freq` times, most frequent first,
/// ties alphabetical.
pub fn build_vocab(corpus: &[CaptionRecord], min_freq: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for record in corpus.iter().filter(|r| r.split == Split::Train) {
        any = true;
        for caption in record.tokenized() {
            for tok in caption {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(Error::Data(
            "no training captions to build a vocabulary from".into(),
        ));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq && !RESERVED.contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_words(ranked.into_iter().map(|(w, _)| w))
}

/// Fixed-length decoder targets: word ids, EOS, then padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedCaption {
    pub ids: Vec<usize>,
    /// True for word and EOS positions.
    pub mask: Vec<bool>,
}

impl EncodedCaption {
    /// Ids up to and including EOS.
    pub fn unpadded(&self) -> &[usize] {
        let n = self.mask.iter().filter(|&&m| m).count();
        &self.ids[..n]
    }
}

/// Maps words (UNK for misses), keeps the first `max_len`, appends EOS and
/// pads to `max_len + 1`.
pub fn encode_caption<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocab,
    max_len: usize,
) -> EncodedCaption {
    let mut ids: Vec<usize> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t.as_ref()))
        .collect();
    ids.push(EOS);
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len + 1, PAD);
    mask.resize(max_len + 1, false);
    EncodedCaption { ids, mask }
}
