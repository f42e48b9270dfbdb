//! Training orchestration: outer rounds for the decoupled variants, the
//! centralized baselines, and continued pre-training.

mod baseline;
mod config;
mod continued;
mod metrics;
mod rounds;
mod setup;
mod train;

use std::path::PathBuf;

pub use baseline::{act_reset, BaselineRun};
pub use config::{TrainHyper, VariantConfig};
pub use continued::{ct_steps, continued_pretrain, CtConfig, CtResult, EmbeddingInit, InitMode, SamplingPolicy};
pub use metrics::{read_jsonl, write_jsonl, MetricsRecord};
pub use rounds::{initial_private_embeddings, DeptRun, SourceState};
pub use setup::{
    build_global_vocab, build_ood, desk_corpora, synthetic_corpora, build_source, build_workload, corpora_from_docs, source_unigram_ce, source_vocab,
    OodData, SourceCorpora, SourceData, Workload,
};
pub use train::{
    draw_batch, draw_batch_sources, draw_mixture_batch, inner_opt, mixture, train_step, InnerStats, SplitAdamW,
    StepStats,
};

use crate::costs::CommCounter;
use crate::error::{DeptError, Result};
use crate::model::{slice_token_embeddings, Checkpoint, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::variant::Variant;

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| DeptError::InvalidArgument(format!("worker pool: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunResult<T> {
    pub variant: Variant,
    /// Globally maintained parameters. For SPEC and SPEC_OPT only the body is
    /// meaningful; the embeddings stay at their initial values.
    pub params: ModelParams<T>,
    /// SPEC and SPEC_OPT: each source's private (φ, ψ).
    pub private: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    /// Records produced by this invocation (after the resume point, if any).
    pub metrics: Vec<MetricsRecord>,
    pub counter: CommCounter,
    pub steps_completed: u64,
    pub rounds_completed: u64,
    /// ACT: the step whose parameters were kept.
    pub selected_step: Option<u64>,
}

impl<T: Scalar> TrainRunResult<T> {
    /// Parameters that evaluate source `k` on its worker vocabulary.
    pub fn source_params(&self, workload: &Workload, k: usize) -> Result<ModelParams<T>> {
        let source = &workload.sources[k];
        if let Some(Some((phi, psi))) = self.private.get(k) {
            return Ok(ModelParams {
                arch: self.params.arch.with_vocab(source.vocab_size()),
                body: self.params.body.clone(),
                tok_emb: phi.clone(),
                pos_emb: psi.clone(),
            });
        }
        match (&source.trim, self.variant.is_baseline()) {
            (Some(trim), false) => slice_token_embeddings(&self.params, trim),
            _ => Ok(self.params.clone()),
        }
    }

    /// Whether the run maintains embeddings over the global vocabulary.
    pub fn has_global_embeddings(&self) -> bool {
        !self.variant.is_specialized()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub workers: usize,
    /// Write a checkpoint every this many rounds (baselines: every `local_steps` steps).
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many rounds in total, as if interrupted.
    pub stop_after: Option<u64>,
}

impl RunOptions {
    pub fn with_workers(workers: usize) -> Self {
        Self { workers, ..Self::default() }
    }

    /// Saves on every `checkpoint_every`-th round and always after the last one.
    fn maybe_checkpoint(&self, round: u64, last: u64, make: impl FnOnce() -> Result<Checkpoint>) -> Result<()> {
        let Some(dir) = &self.checkpoint_dir else { return Ok(()) };
        let periodic = self.checkpoint_every.is_some_and(|every| every > 0 && round % every == 0);
        if periodic || round == last {
            make()?.save(&checkpoint_path(dir, round))?;
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &std::path::Path, round: u64) -> PathBuf {
    dir.join(format!("round-{round:04}.ckpt"))
}

/// Rebuilds the outcome of a run from one of its checkpoints, without metrics.
pub fn load_result<T: Scalar>(
    cfg: &VariantConfig,
    hp: &TrainHyper,
    workload: &Workload,
    checkpoint: &Checkpoint,
) -> Result<TrainRunResult<T>> {
    if cfg.variant.is_baseline() {
        let mut run = BaselineRun::new(cfg.clone(), *hp, workload, 1)?;
        run.restore(checkpoint)?;
        run.into_result(Vec::new())
    } else {
        let mut run = DeptRun::new(cfg.clone(), *hp, workload, 1)?;
        run.restore(checkpoint)?;
        Ok(run.into_result(Vec::new()))
    }
}

/// Runs the configured method end to end, resuming from `resume` if given.
pub fn train<T: Scalar>(
    cfg: &VariantConfig,
    hp: &TrainHyper,
    workload: &Workload,
    opts: &RunOptions,
    resume: Option<&Checkpoint>,
) -> Result<TrainRunResult<T>> {
    let stop = opts.stop_after.unwrap_or(cfg.rounds).min(cfg.rounds);
    let mut metrics = Vec::new();
    if cfg.variant.is_baseline() {
        let mut run = BaselineRun::new(cfg.clone(), *hp, workload, opts.workers)?;
        match resume {
            Some(c) => run.restore(c)?,
            None => metrics.extend(run.eval_records()?),
        }
        while run.step < stop * cfg.local_steps {
            metrics.push(run.step_once()?);
            if run.step % cfg.local_steps == 0 {
                metrics.extend(run.eval_records()?);
                opts.maybe_checkpoint(run.step / cfg.local_steps, cfg.rounds, || run.checkpoint())?;
            }
        }
        run.into_result(metrics)
    } else {
        let mut run = DeptRun::new(cfg.clone(), *hp, workload, opts.workers)?;
        match resume {
            Some(c) => run.restore(c)?,
            None => metrics.extend(run.initial_records()?),
        }
        while run.round < stop {
            metrics.extend(run.step_round()?);
            opts.maybe_checkpoint(run.round, cfg.rounds, || run.checkpoint())?;
        }
        Ok(run.into_result(metrics))
    }
}
