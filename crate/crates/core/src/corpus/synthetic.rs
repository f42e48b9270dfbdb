//! Seeded synthetic corpora with controllable heterogeneity.
//!
//! Each source owns a lexicon of words spelled from its own alphabet; documents
//! are word sequences drawn from a Zipf-weighted first-order Markov chain over
//! that lexicon. Disjoint alphabets give sources disjoint token inventories.

use std::collections::HashSet;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use super::{Corpus, Split};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSource {
    pub id: String,
    pub alphabet: String,
    pub lexicon_size: usize,
    pub train_docs: usize,
    pub validation_docs: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl SyntheticSource {
    pub fn new(id: &str, alphabet: &str, train_docs: usize) -> Self {
        Self {
            id: id.to_string(),
            alphabet: alphabet.to_string(),
            lexicon_size: 48,
            train_docs,
            validation_docs: (train_docs / 5).max(8),
            min_words: 8,
            max_words: 20,
        }
    }
}

/// Three sources over disjoint alphabets plus one mixing all of them.
pub fn desk_sources() -> Vec<SyntheticSource> {
    vec![
        SyntheticSource::new("alpha", "abcdefgh", 90),
        SyntheticSource::new("beta", "ijklmnop", 150),
        SyntheticSource::new("gamma", "qrstuvwx", 120),
        SyntheticSource::new("mixed", "abcdefghijklmnopqrstuvwx", 180),
    ]
}

/// A held-out source with an alphabet none of the desk sources use.
pub fn desk_ood_source() -> SyntheticSource {
    SyntheticSource::new("delta", "yz0123456789", 60)
}

/// Generates the train and validation corpora of one source; validation
/// documents never repeat a training document.
pub fn generate(source: &SyntheticSource, seed: u64) -> (Corpus, Corpus) {
    let source_key = rng::derive_u64(0, &source.id, 0, 0);
    let mut r = rng::stream(seed, "synthetic-lexicon", 0, source_key);
    let alphabet: Vec<char> = source.alphabet.chars().collect();

    let mut lexicon: Vec<String> = Vec::with_capacity(source.lexicon_size);
    let mut seen = HashSet::new();
    while lexicon.len() < source.lexicon_size {
        let len = r.random_range(2..=6);
        let w: String = (0..len).map(|_| alphabet[r.random_range(0..alphabet.len())]).collect();
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    let zipf: Vec<f64> = (1..=lexicon.len()).map(|k| 1.0 / k as f64).collect();
    let unigram = WeightedIndex::new(&zipf).expect("positive weights");
    let successors: Vec<[usize; 3]> = (0..lexicon.len())
        .map(|_| [unigram.sample(&mut r), unigram.sample(&mut r), unigram.sample(&mut r)])
        .collect();

    let mut doc_rng = rng::stream(seed, "synthetic-docs", 0, source_key);
    let make_doc = |r: &mut rng::StreamRng| {
        let n = r.random_range(source.min_words..=source.max_words);
        let mut w = unigram.sample(r);
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            words.push(lexicon[w].as_str());
            w = if r.random_bool(0.7) {
                successors[w][r.random_range(0..3)]
            } else {
                unigram.sample(r)
            };
        }
        words.join(" ")
    };

    let train: Vec<String> = (0..source.train_docs).map(|_| make_doc(&mut doc_rng)).collect();
    let train_set: HashSet<&str> = train.iter().map(String::as_str).collect();
    let mut validation = Vec::with_capacity(source.validation_docs);
    while validation.len() < source.validation_docs {
        let d = make_doc(&mut doc_rng);
        if !train_set.contains(d.as_str()) {
            validation.push(d);
        }
    }
    (
        Corpus::new(&source.id, Split::Train, train),
        Corpus::new(&source.id, Split::Validation, validation),
    )
}
