//! Parameter deltas and their uniform averaging across sources.
//!
//! Token-embedding deltas are per global row with an ownership mask: a row is
//! averaged only over the sources whose vocabulary contains it, and rows no
//! source owns stay bitwise unchanged. A tensor or row with a single
//! contributor takes that worker's final value exactly (the mean of one
//! update is the update itself).

use crate::corpus::TrimMap;
use crate::error::{DeptError, Result};
use crate::model::{pad_embeddings, Body, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDelta<T> {
    pub delta: Tensor<T>,
    pub after: Tensor<T>,
}

impl<T: Scalar> TensorDelta<T> {
    fn new(before: &Tensor<T>, after: &Tensor<T>) -> Result<Self> {
        Ok(Self { delta: after.sub(before)?, after: after.clone() })
    }
}

/// Token-embedding delta scattered to global rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDelta<T> {
    pub delta: Tensor<T>,
    pub after: Tensor<T>,
    pub owned: Vec<bool>,
}

impl<T: Scalar> RowDelta<T> {
    pub fn owned_rows(&self) -> usize {
        self.owned.iter().filter(|&&o| o).count()
    }
}

/// Everything one worker uploads after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet<T> {
    pub source_id: usize,
    pub body: Vec<TensorDelta<T>>,
    pub tok_emb: Option<RowDelta<T>>,
    pub pos_emb: Option<TensorDelta<T>>,
}

impl<T: Scalar> DeltaSet<T> {
    /// Number of parameters this delta transfers.
    pub fn communicated_params(&self) -> u64 {
        let body: u64 = self.body.iter().map(|t| t.delta.len() as u64).sum();
        let tok = self
            .tok_emb
            .as_ref()
            .map_or(0, |r| (r.owned_rows() * r.delta.cols()) as u64);
        let pos = self.pos_emb.as_ref().map_or(0, |p| p.delta.len() as u64);
        body + tok + pos
    }

    /// Embedding parameters (φ and ψ) in this delta.
    pub fn embedding_params(&self) -> u64 {
        self.communicated_params() - self.body.iter().map(|t| t.delta.len() as u64).sum::<u64>()
    }
}

fn body_deltas<T: Scalar>(before: &Body<T>, after: &Body<T>) -> Result<Vec<TensorDelta<T>>> {
    let (b, a) = (before.tensors(), after.tensors());
    if b.len() != a.len() {
        return Err(DeptError::ShapeMismatch("bodies have different block counts".into()));
    }
    b.into_iter().zip(a).map(|(x, y)| TensorDelta::new(x, y)).collect()
}

/// Δθ only; embeddings stay private to the worker.
pub fn compute_body_delta<T: Scalar>(source_id: usize, before: &Body<T>, after: &Body<T>) -> Result<DeltaSet<T>> {
    Ok(DeltaSet { source_id, body: body_deltas(before, after)?, tok_emb: None, pos_emb: None })
}

/// Δθ, Δψ and Δφ. With a trim map, `before`/`after` hold local-vocabulary
/// embeddings and Δφ is scattered to global rows (`𝓘ᵀ Δφ_k`); without one,
/// every row is owned.
pub fn compute_delta<T: Scalar>(
    source_id: usize,
    before: &ModelParams<T>,
    after: &ModelParams<T>,
    trim: Option<&TrimMap>,
) -> Result<DeltaSet<T>> {
    before.check_congruent(after)?;
    let body = body_deltas(&before.body, &after.body)?;
    let pos_emb = Some(TensorDelta::new(&before.pos_emb, &after.pos_emb)?);
    let local = TensorDelta::new(&before.tok_emb, &after.tok_emb)?;
    let tok_emb = match trim {
        None => RowDelta { owned: vec![true; local.delta.rows()], delta: local.delta, after: local.after },
        Some(trim) => {
            let mut owned = vec![false; trim.global_size()];
            for &g in trim.local_to_global() {
                owned[g as usize] = true;
            }
            RowDelta {
                delta: pad_embeddings(&local.delta, trim)?,
                after: pad_embeddings(&local.after, trim)?,
                owned,
            }
        }
    };
    Ok(DeltaSet { source_id, body, tok_emb: Some(tok_emb), pos_emb })
}

/// Elementwise pairwise (cascade) summation of equally sized slices.
fn pairwise_sum<T: Scalar>(items: &[&[T]]) -> Vec<T> {
    match items {
        [] => Vec::new(),
        [one] => one.to_vec(),
        _ => {
            let (l, r) = items.split_at(items.len() / 2);
            let mut acc = pairwise_sum(l);
            acc.iter_mut().zip(pairwise_sum(r)).for_each(|(a, b)| *a += b);
            acc
        }
    }
}

fn average_into<T: Scalar>(out: &mut [T], old: &[T], contributions: &[(&[T], &[T])]) {
    match contributions {
        [] => out.copy_from_slice(old),
        [(_, after)] => out.copy_from_slice(after),
        _ => {
            let deltas: Vec<&[T]> = contributions.iter().map(|(d, _)| *d).collect();
            let sum = pairwise_sum(&deltas);
            let n = T::of(contributions.len() as f64);
            for ((o, &x), s) in out.iter_mut().zip(old).zip(sum) {
                *o = x + s / n;
            }
        }
    }
}

fn average_tensor<T: Scalar>(old: &Tensor<T>, parts: &[&TensorDelta<T>]) -> Result<Tensor<T>> {
    if parts.iter().any(|p| p.delta.shape() != old.shape()) {
        return Err(DeptError::ShapeMismatch(format!("delta not congruent with {:?}", old.shape())));
    }
    let mut out = old.clone();
    let contributions: Vec<(&[T], &[T])> =
        parts.iter().map(|p| (p.delta.data(), p.after.data())).collect();
    average_into(out.data_mut(), old.data(), &contributions);
    Ok(out)
}

/// Outer step: `new = old + mean(Δ)` over the selected sources, processed in
/// ascending source order; token rows average only over their owners.
pub fn outer_apply<T: Scalar>(global: &ModelParams<T>, deltas: &[DeltaSet<T>]) -> Result<ModelParams<T>> {
    if deltas.is_empty() {
        return Err(DeptError::InvalidArgument("outer step needs at least one delta".into()));
    }
    let mut sorted: Vec<&DeltaSet<T>> = deltas.iter().collect();
    sorted.sort_by_key(|d| d.source_id);

    let mut next = global.clone();
    let old_body = global.body.tensors();
    if sorted.iter().any(|d| d.body.len() != old_body.len()) {
        return Err(DeptError::ShapeMismatch("body delta has wrong tensor count".into()));
    }
    for (i, slot) in next.body.tensors_mut().into_iter().enumerate() {
        let parts: Vec<&TensorDelta<T>> = sorted.iter().map(|d| &d.body[i]).collect();
        *slot = average_tensor(old_body[i], &parts)?;
    }

    let pos: Vec<&TensorDelta<T>> = sorted.iter().filter_map(|d| d.pos_emb.as_ref()).collect();
    match pos.len() {
        0 => {}
        n if n == sorted.len() => next.pos_emb = average_tensor(&global.pos_emb, &pos)?,
        _ => return Err(DeptError::InvalidArgument("only some deltas carry positional updates".into())),
    }

    let tok: Vec<&RowDelta<T>> = sorted.iter().filter_map(|d| d.tok_emb.as_ref()).collect();
    match tok.len() {
        0 => {}
        n if n == sorted.len() => {
            let old = &global.tok_emb;
            if tok.iter().any(|r| r.delta.shape() != old.shape() || r.owned.len() != old.rows()) {
                return Err(DeptError::ShapeMismatch("token delta not congruent with global φ".into()));
            }
            for r in 0..old.rows() {
                let owners: Vec<(&[T], &[T])> = tok
                    .iter()
                    .filter(|t| t.owned[r])
                    .map(|t| (t.delta.row(r), t.after.row(r)))
                    .collect();
                average_into(next.tok_emb.row_mut(r), old.row(r), &owners);
            }
        }
        _ => return Err(DeptError::InvalidArgument("only some deltas carry token updates".into())),
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, slice_token_embeddings, Architecture};
    use proptest::prelude::*;

    fn arch(vocab: usize) -> Architecture {
        Architecture { num_blocks: 1, d_model: 4, num_heads: 1, expansion_ratio: 2, seq_len: 3, vocab_size: vocab }
    }

    fn shifted(p: &ModelParams<f64>, by: f64) -> ModelParams<f64> {
        let mut q = p.clone();
        q.tensors_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x += by));
        q
    }

    #[test]
    fn identical_params_give_zero_delta() {
        let p = init_params::<f64>(arch(4), 0).unwrap();
        let trim = TrimMap::from_indices(4, vec![1, 3]).unwrap();
        let local = slice_token_embeddings(&p, &trim).unwrap();
        let d = compute_delta(0, &local, &local, Some(&trim)).unwrap();
        let tok = d.tok_emb.unwrap();
        assert_eq!(tok.owned, vec![false, true, false, true]);
        assert!(tok.delta.data().iter().all(|&x| x == 0.0));
        assert!(d.body.iter().all(|t| t.delta.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn scatter_to_global_rows() {
        let p = init_params::<f64>(arch(4), 0).unwrap();
        let trim = TrimMap::from_indices(4, vec![1]).unwrap();
        let before = slice_token_embeddings(&p, &trim).unwrap();
        let mut after = before.clone();
        after.tok_emb.row_mut(0).iter_mut().for_each(|x| *x += 1.0);
        let tok = compute_delta(0, &before, &after, Some(&trim)).unwrap().tok_emb.unwrap();
        assert_eq!(tok.owned, vec![false, true, false, false]);
        for r in [0, 2, 3] {
            assert!(tok.delta.row(r).iter().all(|&x| x == 0.0));
        }
        for (&d, (&a, &b)) in tok.delta.row(1).iter().zip(after.tok_emb.row(0).iter().zip(before.tok_emb.row(0))) {
            assert_eq!(d, a - b);
        }
        let full = compute_delta(0, &p, &p, None).unwrap().tok_emb.unwrap();
        assert!(full.owned.iter().all(|&o| o));
    }

    #[test]
    fn opposite_deltas_cancel() {
        let g = init_params::<f64>(arch(3), 1).unwrap();
        let up = compute_delta(0, &g, &shifted(&g, 0.25), None).unwrap();
        let down = compute_delta(1, &g, &shifted(&g, -0.25), None).unwrap();
        let next = outer_apply(&g, &[up, down]).unwrap();
        for (a, b) in next.tensors().iter().zip(g.tensors()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_delta_replaces_with_worker_result() {
        let g = init_params::<f64>(arch(3), 1).unwrap();
        let w = init_params::<f64>(arch(3), 2).unwrap();
        let d = compute_delta(0, &g, &w, None).unwrap();
        assert_eq!(outer_apply(&g, &[d]).unwrap(), w);
        assert!(outer_apply::<f64>(&g, &[]).is_err());
    }

    #[test]
    fn sole_owner_row_gets_full_delta_and_unowned_rows_are_untouched() {
        let g = init_params::<f64>(arch(4), 3).unwrap();
        let t0 = TrimMap::from_indices(4, vec![0, 1]).unwrap();
        let t1 = TrimMap::from_indices(4, vec![1, 2]).unwrap();
        let run = |trim: &TrimMap, by: f64, id| {
            let before = slice_token_embeddings(&g, trim).unwrap();
            compute_delta(id, &before, &shifted(&before, by), Some(trim)).unwrap()
        };
        let next = outer_apply(&g, &[run(&t0, 1.0, 0), run(&t1, 3.0, 1)]).unwrap();
        for j in 0..4 {
            assert_eq!(next.tok_emb.row(0)[j], g.tok_emb.row(0)[j] + 1.0);
            assert_eq!(next.tok_emb.row(2)[j], g.tok_emb.row(2)[j] + 3.0);
            assert!((next.tok_emb.row(1)[j] - (g.tok_emb.row(1)[j] + 2.0)).abs() < 1e-15);
        }
        assert_eq!(next.tok_emb.row(3), g.tok_emb.row(3));
    }

    #[test]
    fn body_only_deltas_leave_embeddings_alone() {
        let g = init_params::<f64>(arch(4), 3).unwrap();
        let w = shifted(&g, 0.5);
        let d = compute_body_delta(2, &g.body, &w.body).unwrap();
        assert_eq!(d.embedding_params(), 0);
        let next = outer_apply(&g, &[d]).unwrap();
        assert_eq!(next.tok_emb, g.tok_emb);
        assert_eq!(next.pos_emb, g.pos_emb);
        assert_eq!(next.body, w.body);
    }

    #[test]
    fn mixing_body_only_and_full_deltas_is_rejected() {
        let g = init_params::<f64>(arch(4), 3).unwrap();
        let a = compute_body_delta(0, &g.body, &g.body).unwrap();
        let b = compute_delta(1, &g, &g, None).unwrap();
        assert!(outer_apply(&g, &[a, b]).is_err());
    }

    #[test]
    fn communicated_counts() {
        let g = init_params::<f64>(arch(4), 3).unwrap();
        let trim = TrimMap::from_indices(4, vec![0, 2, 3]).unwrap();
        let local = slice_token_embeddings(&g, &trim).unwrap();
        let d = compute_delta(0, &local, &local, Some(&trim)).unwrap();
        let a = arch(4);
        assert_eq!(d.communicated_params(), a.body_param_count() + 3 * 4 + 3 * 4);
    }

    proptest! {
        #[test]
        fn order_invariant_and_linear(seed in 0u64..500, k in 2usize..5) {
            let g = init_params::<f64>(arch(5), seed).unwrap();
            let deltas: Vec<DeltaSet<f64>> = (0..k)
                .map(|i| {
                    let w = init_params::<f64>(arch(5), seed + 1 + i as u64).unwrap();
                    let trim = TrimMap::from_indices(5, (0..5u32).filter(|r| (r + i as u32) % 3 != 0).collect()).unwrap();
                    let before = slice_token_embeddings(&g, &trim).unwrap();
                    let after = slice_token_embeddings(&w, &trim).unwrap();
                    compute_delta(i, &before, &after, Some(&trim)).unwrap()
                })
                .collect();
            let forward = outer_apply(&g, &deltas).unwrap();
            let mut rev = deltas.clone();
            rev.reverse();
            prop_assert_eq!(&forward, &outer_apply(&g, &rev).unwrap());

            let twice = outer_apply(&g, &[deltas[0].clone(), DeltaSet { source_id: 99, ..deltas[0].clone() }]).unwrap();
            let once = outer_apply(&g, &deltas[..1]).unwrap();
            for (a, b) in twice.tensors().iter().zip(once.tensors()) {
                for (&x, &y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }
}
