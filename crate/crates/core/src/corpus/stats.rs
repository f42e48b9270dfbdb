use super::TokenizedDataset;
use crate::error::{DeptError, Result};

/// Entropy (nats/token) of the empirical unigram distribution of a dataset.
pub fn unigram_cross_entropy(dataset: &TokenizedDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(DeptError::EmptyDataset("unigram cross-entropy of empty dataset".into()));
    }
    let mut counts = vec![0u64; dataset.vocab_size];
    for s in &dataset.sequences {
        for &id in s {
            counts[id as usize] += 1;
        }
    }
    let total = dataset.num_tokens() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total;
            -q * q.ln()
        })
        .sum())
}
