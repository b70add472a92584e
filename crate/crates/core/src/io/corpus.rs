//! Whitespace-tokenized text corpora with an end-of-sentence marker per line.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, ParseError, Result};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Word ↔ id mapping; ids are dense from 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Orders words by descending frequency, ties lexicographically.
    /// `<eos>` and `<unk>` are always present.
    pub fn from_counts(mut counts: BTreeMap<String, usize>) -> Self {
        counts.entry(EOS.to_string()).or_insert(0);
        counts.entry(UNK.to_string()).or_insert(0);
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(entries.into_iter().map(|(w, _)| w).collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unk(&self) -> usize {
        self.id(UNK).expect("vocab always holds <unk>")
    }
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .flat_map(|line| line.split_whitespace().chain(std::iter::once(EOS)))
}

/// Tokenizes `text`, building the vocabulary from it when `vocab` is `None`.
/// Tokens missing from a supplied vocabulary map to `<unk>`.
pub fn tokenize(
    text: &str,
    vocab: Option<&Vocab>,
) -> std::result::Result<(Vec<usize>, Vocab), ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::EmptyCorpus);
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let mut counts = BTreeMap::new();
            for t in tokens(text) {
                *counts.entry(t.to_string()).or_insert(0) += 1;
            }
            Vocab::from_counts(counts)
        }
    };
    let unk = vocab.unk();
    let ids = tokens(text).map(|t| vocab.id(t).unwrap_or(unk)).collect();
    Ok((ids, vocab))
}

pub fn load_text_corpus(path: &Path, vocab: Option<&Vocab>) -> Result<(Vec<usize>, Vocab)> {
    let err = |kind| Error::Parse {
        path: path.to_path_buf(),
        kind,
    };
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| err(ParseError::Utf8))?;
    tokenize(&text, vocab).map_err(err)
}

/// Train/valid/test token streams sharing the training vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Corpus {
    /// Reads `train.txt`, `valid.txt` and `test.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let p = |name: &str| -> PathBuf { dir.join(name) };
        let (train, vocab) = load_text_corpus(&p("train.txt"), None)?;
        let (valid, _) = load_text_corpus(&p("valid.txt"), Some(&vocab))?;
        let (test, _) = load_text_corpus(&p("test.txt"), Some(&vocab))?;
        Ok(Self {
            vocab,
            train,
            valid,
            test,
        })
    }
}
