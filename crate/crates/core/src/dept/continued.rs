//! Continued pre-training: attach embeddings over the global vocabulary to a
//! trained body and train both jointly.

use serde::{Deserialize, Serialize};

use super::config::TrainHyper;
use super::train::{check_dataset, draw_mixture_batch, mixture, train_step, SplitAdamW};
use crate::corpus::{temperature_weights, TokenizedDataset};
use crate::error::{DeptError, Result};
use crate::model::{init_embedding, Architecture, Body, ModelParams};
use crate::optim::CosineSchedule;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingInit<T> {
    /// Fresh draws from the init distribution.
    Random,
    Pretrained { tok_emb: Tensor<T>, pos_emb: Tensor<T> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Random,
    Pretrained,
}

/// How batches mix the sources: equally, or in proportion to their size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingPolicy {
    Uniform,
    Proportional,
}

impl SamplingPolicy {
    pub fn tau(self) -> f64 {
        match self {
            Self::Uniform => 0.0,
            Self::Proportional => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub policy: SamplingPolicy,
    pub seed: u64,
}

/// N_CT for a run of `total_steps`, as the nearest integer to `fraction · N`.
pub fn ct_steps(fraction: f64, total_steps: u64) -> Result<u64> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DeptError::InvalidArgument(format!("continued-training fraction {fraction} outside [0, 1)")));
    }
    Ok((fraction * total_steps as f64).round() as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtResult<T> {
    pub params: ModelParams<T>,
    /// Training loss of every step, measured before that step's update.
    pub losses: Vec<f64>,
    pub schedule: CosineSchedule,
}

impl<T> CtResult<T> {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }
}

/// Trains `body` with the given embeddings for `cfg.steps` steps on a mixture
/// of `datasets`. Random embeddings follow a full cosine cycle peaking at
/// η_max; pretrained ones peak at η_max/2. `observe` sees the parameters
/// before the first step and after every step.
pub fn continued_pretrain<T: Scalar>(
    body: &Body<T>,
    arch: Architecture,
    init: EmbeddingInit<T>,
    datasets: &[&TokenizedDataset],
    cfg: &CtConfig,
    hp: &TrainHyper,
    mut observe: impl FnMut(u64, &ModelParams<T>) -> Result<()>,
) -> Result<CtResult<T>> {
    if cfg.steps == 0 {
        return Err(DeptError::InvalidArgument("continued pre-training needs at least one step".into()));
    }
    if datasets.is_empty() {
        return Err(DeptError::EmptyDataset("no continued pre-training data".into()));
    }
    let (tok_emb, pos_emb, peak) = match init {
        EmbeddingInit::Random => {
            let mut r = rng::stream(cfg.seed, "ct-init", 0, 0);
            let tok = init_embedding(arch.vocab_size, arch.d_model, &mut r);
            let pos = init_embedding(arch.seq_len, arch.d_model, &mut r);
            (tok, pos, hp.peak_lr)
        }
        EmbeddingInit::Pretrained { tok_emb, pos_emb } => {
            if tok_emb.shape() != [arch.vocab_size, arch.d_model] || pos_emb.shape() != [arch.seq_len, arch.d_model] {
                return Err(DeptError::ShapeMismatch(format!(
                    "pretrained embeddings {:?}/{:?} do not fit vocabulary {} and sequence length {}",
                    tok_emb.shape(),
                    pos_emb.shape(),
                    arch.vocab_size,
                    arch.seq_len
                )));
            }
            (tok_emb, pos_emb, hp.peak_lr / 2.0)
        }
    };
    let mut params = ModelParams { arch, body: body.clone(), tok_emb, pos_emb };
    params.check_congruent(&ModelParams::zeros(arch))?;
    for ds in datasets {
        check_dataset(&params, ds)?;
    }
    let sizes: Vec<usize> = datasets.iter().map(|d| d.len()).collect();
    let dist = mixture(&temperature_weights(&sizes, cfg.policy.tau())?)?;
    let schedule = CosineSchedule::new(peak, hp.alpha, cfg.steps, 0)?;
    let mut opt = SplitAdamW::fresh(&params);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    observe(0, &params)?;
    for s in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, "ct-batch", s, 0);
        let batch = draw_mixture_batch(datasets, &dist, cfg.batch_size, &mut r);
        let lr = schedule.lr(s + 1);
        losses.push(train_step(&mut params, &mut opt, &batch, lr, lr, hp)?.loss);
        observe(s + 1, &params)?;
    }
    Ok(CtResult { params, losses, schedule })
}
