//! Per-source corpora, subword vocabularies, tokenization and source sampling.

mod bpe;
mod sampling;
mod stats;
pub mod synthetic;
mod tokenize;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

pub use bpe::{train_compact_vocab, train_subword_vocab, MIN_BYTE_VOCAB};
pub use sampling::{sample_sources, temperature_weights};
pub use stats::unigram_cross_entropy;
pub use tokenize::{detokenize, encode_document, local_vocab_subset, tokenize, TokenizedDataset};
pub use vocab::{build_trim_map, Token, TrimMap, Vocab};

use crate::error::{DeptError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub source_id: String,
    pub documents: Vec<String>,
    pub split: Split,
}

impl Corpus {
    pub fn new(source_id: impl Into<String>, split: Split, documents: Vec<String>) -> Self {
        Self { source_id: source_id.into(), documents, split }
    }

    pub fn is_empty(&self) -> bool {
        self.documents.iter().all(|d| d.is_empty())
    }

    pub fn byte_len(&self) -> usize {
        self.documents.iter().map(String::len).sum()
    }

    /// Concatenates several corpora into one (used to train a shared vocabulary).
    pub fn union<'a>(id: &str, parts: impl IntoIterator<Item = &'a Corpus>) -> Self {
        let documents = parts.into_iter().flat_map(|c| c.documents.iter().cloned()).collect();
        Self::new(id, Split::Train, documents)
    }

    pub fn path(data_dir: &Path, source_id: &str, split: Split) -> PathBuf {
        data_dir.join(format!("{source_id}.{split}.txt"))
    }

    /// Reads `<data_dir>/<source_id>.<split>.txt`; documents are separated by blank lines.
    pub fn load(data_dir: &Path, source_id: &str, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(Self::path(data_dir, source_id, split))?;
        let corpus = Self::new(source_id, split, split_documents(&text));
        if split == Split::Train && corpus.documents.is_empty() {
            return Err(DeptError::EmptyCorpus);
        }
        Ok(corpus)
    }

    pub fn save(&self, data_dir: &Path) -> Result<()> {
        std::fs::write(
            Self::path(data_dir, &self.source_id, self.split),
            self.documents.join("\n\n") + "\n",
        )?;
        Ok(())
    }
}

pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

/// Checks that no validation document also appears in the training split.
pub fn check_disjoint(train: &Corpus, validation: &Corpus) -> Result<()> {
    let seen: HashSet<&str> = train.documents.iter().map(String::as_str).collect();
    if let Some(dup) = validation.documents.iter().find(|d| seen.contains(d.as_str())) {
        return Err(DeptError::InvalidArgument(format!(
            "validation document of source {} also appears in train: {:.40}",
            train.source_id, dup
        )));
    }
    Ok(())
}
