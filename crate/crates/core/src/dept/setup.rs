//! Turns raw per-source corpora into the tokenized inputs a run needs.

use crate::corpus::{
    synthetic,
    build_trim_map, local_vocab_subset, tokenize, train_compact_vocab, train_subword_vocab, unigram_cross_entropy,
    Corpus, Split, TokenizedDataset, TrimMap, Vocab,
};
use crate::error::{DeptError, Result};
use crate::model::Architecture;
use crate::variant::Variant;

#[derive(Debug, Clone)]
pub struct SourceCorpora {
    pub name: String,
    pub train: Corpus,
    pub validation: Corpus,
}

/// One source, tokenized both for its workers and under the global vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub id: usize,
    pub name: String,
    /// Vocabulary the source's worker trains with.
    pub vocab: Vocab,
    /// Local-to-global map when `vocab` is a subset of the global vocabulary.
    pub trim: Option<TrimMap>,
    pub train: TokenizedDataset,
    pub validation: TokenizedDataset,
    pub global_train: TokenizedDataset,
    pub global_validation: TokenizedDataset,
}

impl SourceData {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

/// A held-out source, tokenized under the global vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct OodData {
    pub name: String,
    pub validation: TokenizedDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub variant: Variant,
    /// Architecture over the global vocabulary.
    pub arch: Architecture,
    pub global_vocab: Vocab,
    pub sources: Vec<SourceData>,
}

impl Workload {
    /// Mean worker vocabulary size, as a ratio of integers.
    pub fn mean_local_vocab(&self) -> (u64, u64) {
        let total: u64 = self.sources.iter().map(|s| s.vocab_size() as u64).sum();
        (total, self.sources.len() as u64)
    }

    pub fn global_train_sets(&self) -> Vec<&TokenizedDataset> {
        self.sources.iter().map(|s| &s.global_train).collect()
    }
}

/// Global vocabulary trained on the union of every source's training split.
pub fn build_global_vocab(corpora: &[SourceCorpora], target_size: usize) -> Result<Vocab> {
    let union = Corpus::union("global", corpora.iter().map(|c| &c.train));
    train_subword_vocab(&union, target_size)
}

/// Per-source vocabulary for `variant`: the global one, its used subset, or a
/// compact vocabulary of `spec_opt_vocab` tokens trained on the source alone.
pub fn source_vocab(variant: Variant, global: &Vocab, train: &Corpus, spec_opt_vocab: usize) -> Result<Vocab> {
    match variant {
        Variant::Glob | Variant::Std | Variant::Act => Ok(global.clone()),
        Variant::Trim | Variant::Spec => local_vocab_subset(global, train),
        Variant::SpecOpt => train_compact_vocab(train, spec_opt_vocab),
    }
}

pub fn build_source(
    variant: Variant,
    id: usize,
    corpora: &SourceCorpora,
    vocab: Vocab,
    global: &Vocab,
    seq_len: usize,
) -> Result<SourceData> {
    let global_train = tokenize(&corpora.train, global, seq_len)?;
    let global_validation = tokenize(&corpora.validation, global, seq_len)?;
    if global_train.is_empty() || global_validation.is_empty() {
        return Err(DeptError::EmptyDataset(format!("source {} yields no full sequence", corpora.name)));
    }
    let (trim, train, validation) = if !variant.uses_local_vocab() {
        if vocab != *global {
            return Err(DeptError::InvalidArgument(format!("{variant} trains on the global vocabulary")));
        }
        (None, global_train.clone(), global_validation.clone())
    } else if variant != Variant::SpecOpt {
        let trim = build_trim_map(global, &vocab)?;
        let train = global_train.to_local(&trim)?;
        let validation = global_validation.to_local_or(&trim, global.unk())?;
        (Some(trim), train, validation)
    } else {
        let train = tokenize(&corpora.train, &vocab, seq_len)?;
        let validation = tokenize(&corpora.validation, &vocab, seq_len)?;
        if train.is_empty() || validation.is_empty() {
            return Err(DeptError::EmptyDataset(format!("source {} yields no full sequence", corpora.name)));
        }
        (None, train, validation)
    };
    Ok(SourceData { id, name: corpora.name.clone(), vocab, trim, train, validation, global_train, global_validation })
}

/// Builds every source for `variant`; `arch.vocab_size` is replaced by the
/// global vocabulary size.
pub fn build_workload(
    variant: Variant,
    arch: Architecture,
    global: Vocab,
    corpora: &[SourceCorpora],
    spec_opt_vocab: usize,
) -> Result<Workload> {
    if corpora.is_empty() {
        return Err(DeptError::InvalidArgument("no sources".into()));
    }
    let arch = arch.with_vocab(global.len());
    arch.validate()?;
    let sources = corpora
        .iter()
        .enumerate()
        .map(|(id, c)| {
            let vocab = source_vocab(variant, &global, &c.train, spec_opt_vocab)?;
            build_source(variant, id, c, vocab, &global, arch.seq_len)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Workload { variant, arch, global_vocab: global, sources })
}

pub fn build_ood(corpora: &SourceCorpora, global: &Vocab, seq_len: usize) -> Result<OodData> {
    let validation = tokenize(&corpora.validation, global, seq_len)?;
    if validation.is_empty() {
        return Err(DeptError::EmptyDataset(format!("held-out source {} yields no full sequence", corpora.name)));
    }
    Ok(OodData { name: corpora.name.clone(), validation })
}

/// Unigram cross-entropy of each source's worker-vocabulary training split.
pub fn source_unigram_ce(workload: &Workload) -> Result<Vec<f64>> {
    workload.sources.iter().map(|s| unigram_cross_entropy(&s.train)).collect()
}

/// The synthetic desk sources generated with `seed`.
pub fn desk_corpora(seed: u64) -> Vec<SourceCorpora> {
    synthetic::desk_sources().iter().map(|s| synthetic_corpora(s, seed)).collect()
}

pub fn synthetic_corpora(source: &synthetic::SyntheticSource, seed: u64) -> SourceCorpora {
    let (train, validation) = synthetic::generate(source, seed);
    SourceCorpora { name: source.id.clone(), train, validation }
}

/// Convenience for in-memory corpora: wraps `(name, train docs, validation docs)`.
pub fn corpora_from_docs(name: &str, train: Vec<String>, validation: Vec<String>) -> SourceCorpora {
    SourceCorpora {
        name: name.to_string(),
        train: Corpus::new(name, Split::Train, train),
        validation: Corpus::new(name, Split::Validation, validation),
    }
}
