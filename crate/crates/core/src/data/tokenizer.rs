use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{special, TokenSequence};
use crate::error::{Error, Result};

/// Maps note text to token ids with the class token at position 0.
pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Tokenizes `text`, prepends the class token and truncates to `max_len`.
    fn encode(&self, text: &str, max_len: usize) -> TokenSequence;

    /// Words of `text` that map to the unknown id.
    fn unknown_words(&self, text: &str) -> Vec<String>;
}

/// Lowercase word-level tokenizer over a vocabulary built from training notes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordTokenizer {
    /// Id-ordered words; the first four slots are the reserved ids.
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl WordTokenizer {
    const RESERVED: [&'static str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

    /// Builds a vocabulary from `texts`, keeping words seen at least
    /// `min_count` times. Ids are assigned by descending frequency, then
    /// alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut by_freq: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words = Self::RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(by_freq.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(special::UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.words)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = serde_json::from_str(&s)?;
        if words.len() < Self::RESERVED.len() || words[..4].iter().zip(Self::RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Data(format!("{} is not a vocabulary file", path.display())));
        }
        Ok(Self::from_words(words))
    }
}

impl Tokenizer for WordTokenizer {
    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = vec![special::CLS];
        ids.extend(split_words(text).map(|w| self.id(&w)));
        ids.truncate(max_len.max(1));
        TokenSequence::new(ids)
    }

    fn unknown_words(&self, text: &str) -> Vec<String> {
        split_words(text).filter(|w| !self.index.contains_key(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_ordering() {
        let tok = WordTokenizer::build(["Patient stable. stable!", "patient critical"], 1);
        assert_eq!(tok.word(special::PAD), Some("[PAD]"));
        assert_eq!(tok.word(special::MASK), Some("[MASK]"));
        // "patient" and "stable" both appear twice; alphabetical tie-break
        assert_eq!(tok.word(4), Some("patient"));
        assert_eq!(tok.word(5), Some("stable"));
        assert_eq!(tok.word(6), Some("critical"));
        let seq = tok.encode("Patient CRITICAL foo", 10);
        assert_eq!(seq.token_ids, vec![special::CLS, 4, 6, special::UNK]);
        assert_eq!(tok.unknown_words("patient foo"), vec!["foo".to_string()]);
        assert_eq!(tok.encode("patient stable critical", 2).token_ids.len(), 2);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tok = WordTokenizer::build(["a b c b"], 1);
        let p = dir.path().join("vocab.json");
        tok.save(&p).unwrap();
        let back = WordTokenizer::load(&p).unwrap();
        assert_eq!(back.encode("b c a", 8), tok.encode("b c a", 8));
    }
}
