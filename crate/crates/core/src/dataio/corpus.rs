//! Character- and word-level text corpora.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNKNOWN_WORD: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Character,
    Word,
}

/// A tokenized text with its vocabulary.
#[derive(Clone, Debug)]
pub struct TokenCorpus {
    pub tokens: Vec<u32>,
    pub vocab: Vec<String>,
    pub level: Level,
    index: HashMap<String, u32>,
}

impl TokenCorpus {
    /// Character corpus: the vocabulary is the sorted set of distinct characters.
    pub fn from_chars(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::contract("empty corpus text"));
        }
        let vocab: Vec<String> = text
            .chars()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(String::from)
            .collect();
        let index = build_index(&vocab);
        let tokens = text.chars().map(|c| index[c.encode_utf8(&mut [0; 4]) as &str]).collect();
        Ok(TokenCorpus {
            tokens,
            vocab,
            level: Level::Character,
            index,
        })
    }

    /// Word corpus: whitespace split, case preserved, sorted vocabulary with
    /// the unknown-word token appended last.
    pub fn from_words(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::contract("empty corpus text"));
        }
        let mut vocab: Vec<String> = words
            .iter()
            .copied()
            .filter(|w| *w != UNKNOWN_WORD)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(String::from)
            .collect();
        vocab.push(UNKNOWN_WORD.to_string());
        let index = build_index(&vocab);
        let tokens = words.iter().map(|w| index[*w]).collect();
        Ok(TokenCorpus {
            tokens,
            vocab,
            level: Level::Word,
            index,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unknown_id(&self) -> Option<u32> {
        match self.level {
            Level::Word => self.index.get(UNKNOWN_WORD).copied(),
            Level::Character => None,
        }
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Maps text onto this vocabulary. Unknown words become `<unk>`; an unknown
    /// character is an error since character vocabularies carry no fallback.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self.level {
            Level::Character => text
                .chars()
                .map(|c| {
                    self.index
                        .get(c.encode_utf8(&mut [0; 4]) as &str)
                        .copied()
                        .ok_or_else(|| Error::contract(format!("character {c:?} is not in the vocabulary")))
                })
                .collect(),
            Level::Word => {
                let unk = self.unknown_id().expect("word corpus has <unk>");
                Ok(text
                    .split_whitespace()
                    .map(|w| self.index.get(w).copied().unwrap_or(unk))
                    .collect())
            }
        }
    }

    pub fn detokenize(&self, tokens: &[u32]) -> String {
        let sep = match self.level {
            Level::Character => "",
            Level::Word => " ",
        };
        tokens
            .iter()
            .map(|&t| self.vocab[t as usize].as_str())
            .collect::<Vec<_>>()
            .join(sep)
    }

    /// Splits the token stream into a leading training part and a trailing
    /// held-out part containing `held_out_fraction` of the tokens.
    pub fn split_tail(&self, held_out_fraction: f64) -> (&[u32], &[u32]) {
        let held = ((self.tokens.len() as f64) * held_out_fraction.clamp(0.0, 1.0)).round() as usize;
        self.tokens.split_at(self.tokens.len() - held)
    }
}

fn build_index(vocab: &[String]) -> HashMap<String, u32> {
    vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to() as u64,
        msg: "not valid UTF-8".into(),
    })?;
    if text.is_empty() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            offset: 0,
            msg: "empty corpus file".into(),
        });
    }
    Ok(text)
}

pub fn build_char_corpus(text_path: &Path) -> Result<TokenCorpus> {
    TokenCorpus::from_chars(&read_text(text_path)?)
}

pub fn build_word_corpus(train_path: &Path) -> Result<TokenCorpus> {
    let text = read_text(train_path)?;
    TokenCorpus::from_words(&text).map_err(|_| Error::Ingest {
        path: train_path.to_path_buf(),
        offset: 0,
        msg: "no words in corpus file".into(),
    })
}
