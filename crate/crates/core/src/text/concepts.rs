use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pos_tag, CaptionRecord, Split};
use crate::{Error, Result};

/// The `K` most frequent content words of the training captions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptVocabulary {
    pub words: Vec<String>,
    /// Corpus-wide token counts, aligned with `words`.
    pub counts: Vec<usize>,
}

impl ConceptVocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cv: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if cv.words.len() != cv.counts.len() {
            return Err(Error::Data(
                "concept words and counts differ in length".into(),
            ));
        }
        Ok(cv)
    }
}

pub fn build_concept_vocabulary(corpus: &[CaptionRecord], k: usize) -> Result<ConceptVocabulary> {
    if k == 0 {
        return Err(Error::Config("concept count must be >= 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for record in corpus.iter().filter(|r| r.split == Split::Train) {
        any = true;
        for caption in record.tokenized() {
            for (tok, tag) in caption.iter().zip(pos_tag(&caption)) {
                if tag.is_content() {
                    *counts.entry(tok.clone()).or_default() += 1;
                }
            }
        }
    }
    if !any {
        return Err(Error::Data(
            "no training captions to extract concepts from".into(),
        ));
    }
    if counts.len() < k {
        return Err(Error::ConceptUnderflow {
            available: counts.len(),
            requested: k,
        });
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    let (words, counts) = ranked.into_iter().unzip();
    Ok(ConceptVocabulary { words, counts })
}

/// `L_k = 1` when concept `k` occurs in any of the record's captions.
pub fn concept_label_vector(record: &CaptionRecord, cv: &ConceptVocabulary) -> Vec<bool> {
    let present: HashSet<String> = record.tokenized().into_iter().flatten().collect();
    cv.words.iter().map(|w| present.contains(w)).collect()
}
