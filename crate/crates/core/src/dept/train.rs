//! Single-model training steps shared by every method.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::config::TrainHyper;
use crate::corpus::TokenizedDataset;
use crate::error::{DeptError, Result};
use crate::model::{backward, forward, ModelParams};
use crate::optim::{clip_grad_norm, AdamWState, CosineSchedule};
use crate::scalar::Scalar;

/// AdamW state split between the body and the embeddings, which follow
/// different reset policies (and, for ACT, different learning rates).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAdamW<T> {
    pub body: AdamWState<T>,
    pub emb: AdamWState<T>,
}

impl<T: Scalar> SplitAdamW<T> {
    pub fn fresh(params: &ModelParams<T>) -> Self {
        Self { body: AdamWState::for_tensors(params.body.tensors()), emb: fresh_embedding_state(params) }
    }
}

pub fn fresh_embedding_state<T: Scalar>(params: &ModelParams<T>) -> AdamWState<T> {
    AdamWState::for_tensors([&params.tok_emb, &params.pos_emb])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub act_norm: f64,
    pub grad_norm: f64,
}

/// Forward, backward, clip and one AdamW update.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut SplitAdamW<T>,
    batch: &[Vec<u32>],
    body_lr: f64,
    emb_lr: f64,
    hp: &TrainHyper,
) -> Result<StepStats> {
    let out = forward(params, batch)?;
    let loss = out.loss.as_f64();
    if !loss.is_finite() {
        return Err(DeptError::NonFinite(format!("training loss {loss}")));
    }
    let act_norm = out.trace.activation_l2_norm();
    let mut grads = backward(params, out.trace, T::one())?;
    let grad_norm = clip_grad_norm(&mut grads, hp.max_grad_norm);
    opt.body.step(params.body.tensors_mut(), grads.body.tensors(), body_lr, &hp.adamw)?;
    opt.emb.step(
        vec![&mut params.tok_emb, &mut params.pos_emb],
        vec![&grads.tok_emb, &grads.pos_emb],
        emb_lr,
        &hp.adamw,
    )?;
    Ok(StepStats { loss, act_norm, grad_norm })
}

/// `batch_size` sequences drawn uniformly with replacement.
pub fn draw_batch<R: Rng + ?Sized>(dataset: &TokenizedDataset, batch_size: usize, rng: &mut R) -> Vec<Vec<u32>> {
    (0..batch_size).map(|_| dataset.sequences[rng.random_range(0..dataset.len())].clone()).collect()
}

/// For each sequence of a batch, the source it is drawn from.
pub fn draw_batch_sources<R: Rng + ?Sized>(dist: &WeightedIndex<f64>, batch_size: usize, rng: &mut R) -> Vec<usize> {
    (0..batch_size).map(|_| dist.sample(rng)).collect()
}

/// Mixed batch: each sequence picks a source by `dist`, then a sequence of
/// that source uniformly.
pub fn draw_mixture_batch<R: Rng + ?Sized>(
    datasets: &[&TokenizedDataset],
    dist: &WeightedIndex<f64>,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<u32>> {
    draw_batch_sources(dist, batch_size, rng)
        .into_iter()
        .map(|k| {
            let ds = datasets[k];
            ds.sequences[rng.random_range(0..ds.len())].clone()
        })
        .collect()
}

pub fn mixture(weights: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights).map_err(|e| DeptError::InvalidArgument(format!("sampling weights: {e}")))
}

pub fn check_dataset<T: Scalar>(params: &ModelParams<T>, dataset: &TokenizedDataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(DeptError::EmptyDataset("no sequences to train on".into()));
    }
    if dataset.vocab_size != params.vocab_size() {
        return Err(DeptError::ShapeMismatch(format!(
            "dataset over {} tokens, embeddings have {} rows",
            dataset.vocab_size,
            params.vocab_size()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InnerStats {
    pub losses: Vec<f64>,
    pub act_norms: Vec<f64>,
    pub last_lr: f64,
}

impl InnerStats {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    pub fn max_act_norm(&self) -> f64 {
        self.act_norms.iter().copied().fold(0.0, f64::max)
    }
}

/// `steps` AdamW steps on uniform batches from `dataset`. Step `i` uses the
/// schedule at global step `start_step + i + 1`, so workers of one round
/// share a learning-rate trajectory.
#[allow(clippy::too_many_arguments)]
pub fn inner_opt<T: Scalar, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    opt: &mut SplitAdamW<T>,
    dataset: &TokenizedDataset,
    batch_size: usize,
    schedule: &CosineSchedule,
    start_step: u64,
    steps: u64,
    rng: &mut R,
    hp: &TrainHyper,
) -> Result<InnerStats> {
    check_dataset(params, dataset)?;
    let mut stats = InnerStats::default();
    for i in 0..steps {
        let batch = draw_batch(dataset, batch_size, rng);
        let lr = schedule.lr(start_step + i + 1);
        let s = train_step(params, opt, &batch, lr, lr, hp)?;
        stats.losses.push(s.loss);
        stats.act_norms.push(s.act_norm);
        stats.last_lr = lr;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, loss, Architecture};
    use crate::rng;

    fn arch() -> Architecture {
        Architecture { num_blocks: 1, d_model: 8, num_heads: 2, expansion_ratio: 2, seq_len: 6, vocab_size: 5 }
    }

    fn repetitive() -> TokenizedDataset {
        let seqs = (0..8).map(|i| (0..6).map(|j| ((i + j) % 3 + 2) as u32).collect()).collect();
        TokenizedDataset::new(6, 5, seqs).unwrap()
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let p0 = init_params::<f64>(arch(), 1).unwrap();
        let mut p = p0.clone();
        let mut opt = SplitAdamW::fresh(&p);
        let sched = CosineSchedule::with_default_warmup(1e-2, 0.1, 10).unwrap();
        let mut r = rng::stream(0, "batch", 0, 0);
        inner_opt(&mut p, &mut opt, &repetitive(), 4, &sched, 0, 0, &mut r, &TrainHyper::new(1e-2, 0.1)).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn loss_decreases_on_repetitive_data() {
        let mut p = init_params::<f64>(arch(), 1).unwrap();
        let ds = repetitive();
        let before = loss(&p, &ds.sequences).unwrap();
        let mut opt = SplitAdamW::fresh(&p);
        let sched = CosineSchedule::with_default_warmup(1e-2, 0.1, 200).unwrap();
        let mut r = rng::stream(0, "batch", 0, 0);
        let st = inner_opt(&mut p, &mut opt, &ds, 4, &sched, 0, 200, &mut r, &TrainHyper::new(1e-2, 0.1)).unwrap();
        assert_eq!(st.losses.len(), 200);
        assert!(loss(&p, &ds.sequences).unwrap() < before);
        assert_eq!(opt.body.t, 200);
    }

    #[test]
    fn vocab_mismatch_and_empty_data_are_errors() {
        let mut p = init_params::<f64>(arch(), 1).unwrap();
        let mut opt = SplitAdamW::fresh(&p);
        let sched = CosineSchedule::with_default_warmup(1e-2, 0.1, 10).unwrap();
        let mut r = rng::stream(0, "batch", 0, 0);
        let hp = TrainHyper::new(1e-2, 0.1);
        let wrong = TokenizedDataset::new(6, 7, vec![vec![0; 6]]).unwrap();
        assert!(inner_opt(&mut p, &mut opt, &wrong, 2, &sched, 0, 1, &mut r, &hp).is_err());
        let empty = TokenizedDataset::new(6, 5, vec![]).unwrap();
        assert!(matches!(
            inner_opt(&mut p, &mut opt, &empty, 2, &sched, 0, 1, &mut r, &hp),
            Err(DeptError::EmptyDataset(_))
        ));
    }

    #[test]
    fn split_state_matches_joint_state() {
        let p0 = init_params::<f64>(arch(), 2).unwrap();
        let batch = repetitive().sequences[..3].to_vec();
        let hp = TrainHyper::new(1e-2, 0.1);

        let mut split = p0.clone();
        let mut opt = SplitAdamW::fresh(&split);
        train_step(&mut split, &mut opt, &batch, 0.01, 0.01, &hp).unwrap();

        let mut joint = p0.clone();
        let out = forward(&joint, &batch).unwrap();
        let mut g = backward(&joint, out.trace, 1.0).unwrap();
        clip_grad_norm(&mut g, 1.0);
        let mut st = AdamWState::for_params(&joint);
        st.step(joint.tensors_mut(), g.tensors(), 0.01, &hp.adamw).unwrap();
        assert_eq!(split, joint);
    }

    #[test]
    fn mixture_batches_follow_weights() {
        let dist = mixture(&[0.25, 0.75]).unwrap();
        let mut r = rng::stream(3, "hist", 0, 0);
        let draws = draw_batch_sources(&dist, 40_000, &mut r);
        let frac = draws.iter().filter(|&&k| k == 1).count() as f64 / draws.len() as f64;
        assert!((frac - 0.75).abs() < 0.01);
        assert!(mixture(&[0.0, 0.0]).is_err());
    }
}
