use std::collections::BTreeSet;

use super::vocab::{Token, TrimMap, Vocab};
use super::Corpus;
use crate::error::{DeptError, Result};

/// Fixed-length training windows over one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDataset {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub sequences: Vec<Vec<u32>>,
}

impl TokenizedDataset {
    pub fn new(seq_len: usize, vocab_size: usize, sequences: Vec<Vec<u32>>) -> Result<Self> {
        for s in &sequences {
            if s.len() != seq_len {
                return Err(DeptError::ShapeMismatch(format!(
                    "sequence of length {} in dataset with seq_len {seq_len}",
                    s.len()
                )));
            }
            if let Some(&id) = s.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(DeptError::TokenOutOfRange { id, size: vocab_size });
            }
        }
        Ok(Self { seq_len, vocab_size, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.len() * self.seq_len
    }

    /// Re-indexes global ids into the local vocabulary of `trim`.
    pub fn to_local(&self, trim: &TrimMap) -> Result<Self> {
        if trim.global_size() != self.vocab_size {
            return Err(DeptError::TrimInconsistency(format!(
                "trim map over {} global tokens, dataset over {}",
                trim.global_size(),
                self.vocab_size
            )));
        }
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&g| {
                        trim.to_local(g).ok_or_else(|| {
                            DeptError::TrimInconsistency(format!("token {g} outside local vocab"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seq_len: self.seq_len, vocab_size: trim.local_size(), sequences })
    }

    /// Like [`Self::to_local`], but maps tokens outside the local vocabulary
    /// to the local id of global token `fallback` (normally UNK).
    pub fn to_local_or(&self, trim: &TrimMap, fallback: u32) -> Result<Self> {
        let fb = trim.to_local(fallback).ok_or_else(|| {
            DeptError::TrimInconsistency(format!("fallback token {fallback} outside local vocab"))
        })?;
        if trim.global_size() != self.vocab_size {
            return Err(DeptError::TrimInconsistency(format!(
                "trim map over {} global tokens, dataset over {}",
                trim.global_size(),
                self.vocab_size
            )));
        }
        let sequences =
            self.sequences.iter().map(|s| s.iter().map(|&g| trim.to_local(g).unwrap_or(fb)).collect()).collect();
        Ok(Self { seq_len: self.seq_len, vocab_size: trim.local_size(), sequences })
    }

    /// Serializes as `#tokens v1 seq_len=<l> vocab=<v> count=<n>` followed by one
    /// space-separated sequence per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "#tokens v1 seq_len={} vocab={} count={}\n",
            self.seq_len,
            self.vocab_size,
            self.sequences.len()
        );
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(u32::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = || DeptError::Format("bad token file header".into());
        let header = lines.next().ok_or_else(bad)?;
        let rest = header.strip_prefix("#tokens v1 ").ok_or_else(bad)?;
        let mut fields = [0usize; 3];
        for (slot, (key, part)) in
            fields.iter_mut().zip(["seq_len=", "vocab=", "count="].iter().zip(rest.split(' ')))
        {
            *slot = part.strip_prefix(key).and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        }
        let [seq_len, vocab_size, count] = fields;
        let sequences = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split(' ')
                    .map(|t| t.parse::<u32>().map_err(|_| DeptError::Format(format!("bad id {t:?}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if sequences.len() != count {
            return Err(DeptError::Format(format!(
                "token file declares {count} sequences, found {}",
                sequences.len()
            )));
        }
        Self::new(seq_len, vocab_size, sequences)
    }
}

/// Greedy longest-match segmentation of one document, prefixed with BOS.
/// Bytes with no matching token become UNK.
pub fn encode_document(text: &str, vocab: &Vocab) -> Vec<u32> {
    let bytes = text.as_bytes();
    let mut ids = Vec::with_capacity(bytes.len() + 1);
    ids.push(vocab.bos());
    let mut pos = 0;
    while pos < bytes.len() {
        let longest = vocab.max_token_len().min(bytes.len() - pos);
        let hit = (1..=longest)
            .rev()
            .find_map(|len| vocab.id_of_bytes(&bytes[pos..pos + len]).map(|id| (id, len)));
        match hit {
            Some((id, len)) => {
                ids.push(id);
                pos += len;
            }
            None => {
                ids.push(vocab.unk());
                pos += 1;
            }
        }
    }
    ids
}

/// Concatenates the bytes of the given ids, skipping specials.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Vec<u8> {
    let mut out = Vec::new();
    for &id in ids {
        if let Some(Token::Bytes(b)) = vocab.token(id) {
            out.extend_from_slice(b);
        }
    }
    out
}

/// BOS-prefixed documents are concatenated and cut into `seq_len` windows;
/// the trailing remainder is dropped.
pub fn tokenize(corpus: &Corpus, vocab: &Vocab, seq_len: usize) -> Result<TokenizedDataset> {
    if seq_len < 2 {
        return Err(DeptError::InvalidArgument(format!("seq_len {seq_len} < 2")));
    }
    let stream: Vec<u32> =
        corpus.documents.iter().flat_map(|d| encode_document(d, vocab)).collect();
    let sequences = stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect();
    Ok(TokenizedDataset { seq_len, vocab_size: vocab.len(), sequences })
}

/// The global tokens a corpus actually uses (plus both specials), in global id order.
pub fn local_vocab_subset(global: &Vocab, corpus: &Corpus) -> Result<Vocab> {
    if global.is_empty() {
        return Err(DeptError::InvalidVocab("empty global vocabulary".into()));
    }
    let mut used: BTreeSet<u32> = [global.unk(), global.bos()].into_iter().collect();
    for d in &corpus.documents {
        used.extend(encode_document(d, global));
    }
    Vocab::new(used.into_iter().map(|id| global.tokens()[id as usize].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{train_subword_vocab, Split};
    use proptest::prelude::*;

    fn corpus(docs: &[&str]) -> Corpus {
        Corpus::new("t", Split::Train, docs.iter().map(|s| s.to_string()).collect())
    }

    fn small_vocab(tokens: &[&str]) -> Vocab {
        let mut all = vec![Token::Unk, Token::Bos];
        all.extend(tokens.iter().map(Token::bytes));
        Vocab::new(all).unwrap()
    }

    #[test]
    fn longest_match_is_preferred() {
        let v = small_vocab(&["a", "aa"]);
        assert_eq!(encode_document("aaa", &v), vec![1, 3, 2]);
        // "aa" with seq_len 3 fills exactly one window
        let ds = tokenize(&corpus(&["aa", "a"]), &v, 3).unwrap();
        assert_eq!(ds.sequences, vec![vec![1, 3, 1]]);
    }

    #[test]
    fn remainder_dropped() {
        let v = small_vocab(&["x"]);
        // BOS + 9 tokens = 10 ids
        let ds = tokenize(&corpus(&["xxxxxxxxx"]), &v, 4).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.sequences.iter().all(|s| s.len() == 4));
    }

    #[test]
    fn unknown_byte_maps_to_unk() {
        let v = small_vocab(&["a"]);
        assert_eq!(encode_document("aza", &v), vec![1, 2, 0, 2]);
    }

    #[test]
    fn seq_len_must_be_at_least_two() {
        assert!(tokenize(&corpus(&["a"]), &small_vocab(&["a"]), 1).is_err());
    }

    #[test]
    fn local_subset_examples() {
        let global = small_vocab(&["a", "b"]);
        let local = local_vocab_subset(&global, &corpus(&["aaaa"])).unwrap();
        assert_eq!(local.tokens(), &[Token::Unk, Token::Bos, Token::bytes("a")]);

        let g2 = Vocab::new(vec![Token::Unk, Token::bytes("p"), Token::Bos, Token::bytes("q")])
            .unwrap();
        let l2 = local_vocab_subset(&g2, &corpus(&["pq"])).unwrap();
        assert_eq!(l2.len(), 4);

        let empty = local_vocab_subset(&global, &corpus(&[""])).unwrap();
        assert_eq!(empty.tokens(), &[Token::Unk, Token::Bos]);
    }

    #[test]
    fn dataset_reindexing() {
        let global = small_vocab(&["a", "b", "c"]);
        let local = small_vocab(&["c", "a"]);
        let trim = crate::corpus::build_trim_map(&global, &local).unwrap();
        let ds = tokenize(&corpus(&["acca"]), &global, 5).unwrap();
        let l = ds.to_local(&trim).unwrap();
        assert_eq!(l.sequences, vec![vec![1, 3, 2, 2, 3]]);
        assert_eq!(l.vocab_size, 4);
        let bad = tokenize(&corpus(&["abca"]), &global, 5).unwrap();
        assert!(matches!(bad.to_local(&trim), Err(DeptError::TrimInconsistency(_))));
        let lossy = bad.to_local_or(&trim, global.unk()).unwrap();
        assert_eq!(lossy.sequences, vec![vec![1, 3, 0, 2, 3]]);
    }

    #[test]
    fn token_file_roundtrip() {
        let ds = TokenizedDataset::new(3, 10, vec![vec![1, 2, 3], vec![9, 0, 4]]).unwrap();
        assert_eq!(TokenizedDataset::from_text(&ds.to_text()).unwrap(), ds);
        assert!(TokenizedDataset::new(3, 4, vec![vec![1, 2, 5]]).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_encode(text in "[a-e ]{0,40}") {
            let c = corpus(&["abcde abc ab a", "eeddcc"]);
            let v = train_subword_vocab(&c, 270).unwrap();
            let ids = encode_document(&text, &v);
            prop_assert_eq!(ids[0], v.bos());
            prop_assert_eq!(detokenize(&ids, &v), text.as_bytes().to_vec());
        }
    }
}
