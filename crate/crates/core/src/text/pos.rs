use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// The shipped `word<TAB>TAG` lexicon.
pub const LEXICON: &str = include_str!("../../data/pos_lexicon.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Verb,
    Adv,
    Adj,
    Det,
    Pron,
    Prep,
    Other,
}

impl PosTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adv => "ADV",
            PosTag::Adj => "ADJ",
            PosTag::Det => "DET",
            PosTag::Pron => "PRON",
            PosTag::Prep => "PREP",
            PosTag::Other => "OTHER",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "NOUN" => PosTag::Noun,
            "VERB" => PosTag::Verb,
            "ADV" => PosTag::Adv,
            "ADJ" => PosTag::Adj,
            "DET" => PosTag::Det,
            "PRON" => PosTag::Pron,
            "PREP" => PosTag::Prep,
            "OTHER" => PosTag::Other,
            _ => return None,
        })
    }

    /// Tags whose words can become concepts.
    pub fn is_content(self) -> bool {
        matches!(self, PosTag::Noun | PosTag::Verb | PosTag::Adv)
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn lexicon() -> &'static HashMap<&'static str, PosTag> {
    static MAP: OnceLock<HashMap<&'static str, PosTag>> = OnceLock::new();
    MAP.get_or_init(|| {
        LEXICON
            .lines()
            .filter_map(|line| {
                let (word, tag) = line.split_once('\t')?;
                Some((
                    word,
                    PosTag::parse(tag.trim()).expect("bad tag in shipped lexicon"),
                ))
            })
            .collect()
    })
}

fn is_verb_stem(stem: &str) -> bool {
    lexicon().get(stem) == Some(&PosTag::Verb)
}

/// Whether `word` is an inflection (`-s`, `-es`, `-ed`, `-ing`) of a verb in
/// the lexicon.
fn inflected_verb(word: &str) -> bool {
    for suffix in ["ing", "ed", "es", "s"] {
        let Some(stem) = word.strip_suffix(suffix) else {
            continue;
        };
        if stem.is_empty() {
            continue;
        }
        if is_verb_stem(stem) {
            return true;
        }
        // moving -> move, raced -> race
        if matches!(suffix, "ing" | "ed") && is_verb_stem(&format!("{stem}e")) {
            return true;
        }
        // running -> run, stopped -> stop
        let b = stem.as_bytes();
        if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] && is_verb_stem(&stem[..stem.len() - 1])
        {
            return true;
        }
        // carries -> carry, carried -> carry
        if matches!(suffix, "es" | "ed") {
            if let Some(s) = stem.strip_suffix('i') {
                if is_verb_stem(&format!("{s}y")) {
                    return true;
                }
            }
        }
    }
    false
}

fn tag_one(word: &str) -> PosTag {
    if let Some(&tag) = lexicon().get(word) {
        return tag;
    }
    if word.len() > 2 && word.ends_with("ly") {
        return PosTag::Adv;
    }
    if inflected_verb(word) {
        return PosTag::Verb;
    }
    PosTag::Noun
}

/// Context-free tags: lexicon, then suffix rules, then `NOUN`.
pub fn pos_tag<S: AsRef<str>>(tokens: &[S]) -> Vec<PosTag> {
    tokens.iter().map(|t| tag_one(t.as_ref())).collect()
}
