//! Deterministic greedy byte-pair merge trainer.
//!
//! Each iteration merges the most frequent adjacent symbol pair; ties go to
//! the pair whose `(left bytes, right bytes)` is lexicographically smallest.
//! Training stops at the target size or when no adjacent pair remains.

use std::collections::{BTreeSet, HashMap};

use super::vocab::{Token, Vocab};
use super::Corpus;
use crate::error::{DeptError, Result};

/// 256 byte symbols plus UNK and BOS.
pub const MIN_BYTE_VOCAB: usize = 258;

/// Trains a vocabulary over the full byte alphabet. `target_size` must be at
/// least [`MIN_BYTE_VOCAB`].
pub fn train_subword_vocab(corpus: &Corpus, target_size: usize) -> Result<Vocab> {
    if target_size < MIN_BYTE_VOCAB {
        return Err(DeptError::InvalidArgument(format!(
            "target size {target_size} below the byte-level minimum {MIN_BYTE_VOCAB}"
        )));
    }
    if corpus.is_empty() {
        return Err(DeptError::EmptyCorpus);
    }
    let mut tokens = vec![Token::Unk, Token::Bos];
    tokens.extend((0..=255u8).map(|b| Token::Bytes(vec![b])));
    train_from_base(corpus, tokens, target_size)
}

/// Trains a vocabulary whose base alphabet is only the bytes observed in the
/// corpus, so small per-source vocabularies (below 258) are reachable.
/// Bytes outside the alphabet tokenize to UNK.
pub fn train_compact_vocab(corpus: &Corpus, target_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(DeptError::EmptyCorpus);
    }
    let alphabet: BTreeSet<u8> =
        corpus.documents.iter().flat_map(|d| d.as_bytes().iter().copied()).collect();
    if target_size < alphabet.len() + 2 {
        return Err(DeptError::InvalidArgument(format!(
            "target size {target_size} below observed alphabet ({} bytes) plus specials",
            alphabet.len()
        )));
    }
    let mut tokens = vec![Token::Unk, Token::Bos];
    tokens.extend(alphabet.into_iter().map(|b| Token::Bytes(vec![b])));
    train_from_base(corpus, tokens, target_size)
}

fn train_from_base(corpus: &Corpus, base: Vec<Token>, target_size: usize) -> Result<Vocab> {
    let mut symbols: Vec<Vec<u8>> = Vec::new();
    let mut id_of: HashMap<Vec<u8>, u32> = HashMap::new();
    let mut tokens = Vec::with_capacity(target_size);
    for t in base {
        if let Token::Bytes(b) = &t {
            id_of.insert(b.clone(), symbols.len() as u32);
            symbols.push(b.clone());
        }
        tokens.push(t);
    }

    let mut seqs: Vec<Vec<u32>> = corpus
        .documents
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| d.bytes().map(|b| id_of[&vec![b]]).collect())
        .collect();

    while tokens.len() < target_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let Some((&(l, r), _)) = counts.iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                // reversed: smaller bytes win the tie
                let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                kb.cmp(&ka)
            })
        }) else {
            break;
        };

        let mut merged = symbols[l as usize].clone();
        merged.extend_from_slice(&symbols[r as usize]);
        let new_id = match id_of.get(&merged) {
            Some(&id) => id,
            None => {
                let id = symbols.len() as u32;
                id_of.insert(merged.clone(), id);
                symbols.push(merged.clone());
                tokens.push(Token::Bytes(merged));
                id
            }
        };
        for s in seqs.iter_mut() {
            apply_merge(s, l, r, new_id);
        }
    }
    Vocab::new(tokens)
}

fn apply_merge(seq: &mut Vec<u32>, l: u32, r: u32, new_id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}
