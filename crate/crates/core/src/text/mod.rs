//! Tokenization, vocabularies, part-of-speech tags and concept labels.

mod concepts;
mod corpus;
mod pos;
mod vocab;

pub use concepts::{build_concept_vocabulary, concept_label_vector, ConceptVocabulary};
pub use corpus::{read_jsonl, records_in_split, write_jsonl, CaptionRecord, Split};
pub use pos::{pos_tag, PosTag, LEXICON};
pub use vocab::{build_vocab, encode_caption, EncodedCaption, Vocab, EOS, PAD, SOS, UNK};

/// Lowercases, drops punctuation (keeping apostrophes between letters or
/// digits) and splits on whitespace.
pub fn normalize_and_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::with_capacity(chunk.len());
        for (i, &c) in chars.iter().enumerate() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else if c == '\''
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric()
            {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized single-space form of a caption.
pub fn normalize(text: &str) -> String {
    detokenize(&normalize_and_tokenize(text))
}
