//! Outer rounds for GLOB, TRIM, SPEC and SPEC_OPT.

use rayon::prelude::*;
use rayon::ThreadPool;

use super::config::{TrainHyper, VariantConfig};
use super::metrics::MetricsRecord;
use super::setup::{SourceData, Workload};
use super::train::{inner_opt, InnerStats, SplitAdamW};
use super::{thread_pool, TrainRunResult};
use crate::corpus::sample_sources;
use crate::costs::CommCounter;
use crate::error::{DeptError, Result};
use crate::eval::{evaluate_dataset, EvalStats};
use crate::model::{init_embedding, init_params, l2_norm, param_l2_norm, slice_token_embeddings, Checkpoint, ModelParams};
use crate::optim::{compute_body_delta, compute_delta, outer_apply, AdamWState, CosineSchedule, DeltaSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::variant::Variant;

/// Per-source state that survives across rounds. Only SPEC and SPEC_OPT keep
/// anything here: private embeddings and their optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceState<T> {
    pub source_id: usize,
    pub private_phi: Option<Tensor<T>>,
    pub private_psi: Option<Tensor<T>>,
    pub private_opt: Option<AdamWState<T>>,
    pub initialized: bool,
}

impl<T: Scalar> SourceState<T> {
    pub fn new(source_id: usize) -> Self {
        Self { source_id, private_phi: None, private_psi: None, private_opt: None, initialized: false }
    }
}

/// Private embeddings a SPEC source starts from; reproducible from the seed
/// alone so they can be evaluated before the source is first selected.
pub fn initial_private_embeddings<T: Scalar>(
    seed: u64,
    source: &SourceData,
    d_model: usize,
    seq_len: usize,
) -> (Tensor<T>, Tensor<T>) {
    let mut r = rng::stream(seed, "spec-init", 0, source.id as u64);
    let phi = init_embedding(source.vocab_size(), d_model, &mut r);
    let psi = init_embedding(seq_len, d_model, &mut r);
    (phi, psi)
}

struct WorkerOutput<T> {
    source_id: usize,
    delta: DeltaSet<T>,
    stats: InnerStats,
    private: Option<(Tensor<T>, Tensor<T>, AdamWState<T>)>,
    download: u64,
    download_embeddings: u64,
}

pub struct DeptRun<'w, T> {
    pub cfg: VariantConfig,
    pub hp: TrainHyper,
    pub workload: &'w Workload,
    pub global: ModelParams<T>,
    pub states: Vec<SourceState<T>>,
    /// Rounds completed.
    pub round: u64,
    pub counter: CommCounter,
    schedule: CosineSchedule,
    pool: ThreadPool,
}

impl<'w, T: Scalar> DeptRun<'w, T> {
    pub fn new(cfg: VariantConfig, hp: TrainHyper, workload: &'w Workload, workers: usize) -> Result<Self> {
        if cfg.variant.is_baseline() {
            return Err(DeptError::InvalidArgument(format!("{} is not a decoupled variant", cfg.variant)));
        }
        cfg.validate(workload.sources.len())?;
        if cfg.variant == Variant::Trim && workload.sources.iter().any(|s| s.trim.is_none()) {
            return Err(DeptError::TrimInconsistency("TRIM needs a trim map for every source".into()));
        }
        for s in &workload.sources {
            if s.train.vocab_size != s.vocab_size() {
                return Err(DeptError::TrimInconsistency(format!("source {} data and vocabulary disagree", s.name)));
            }
        }
        let global = init_params(workload.arch, cfg.seed)?;
        let states = (0..workload.sources.len()).map(SourceState::new).collect();
        let schedule = hp.schedule(cfg.total_steps())?;
        Ok(Self { cfg, hp, workload, global, states, round: 0, counter: CommCounter::default(), schedule, pool: thread_pool(workers)? })
    }

    fn private_or_initial(&self, k: usize) -> (Tensor<T>, Tensor<T>) {
        let st = &self.states[k];
        match (&st.private_phi, &st.private_psi) {
            (Some(phi), Some(psi)) => (phi.clone(), psi.clone()),
            _ => initial_private_embeddings(
                self.cfg.seed,
                &self.workload.sources[k],
                self.global.arch.d_model,
                self.global.arch.seq_len,
            ),
        }
    }

    /// Parameters source `k` trains and is evaluated with.
    pub fn source_params(&self, k: usize) -> Result<ModelParams<T>> {
        let source = &self.workload.sources[k];
        if self.cfg.variant.is_specialized() {
            let (tok_emb, pos_emb) = self.private_or_initial(k);
            return Ok(ModelParams {
                arch: self.global.arch.with_vocab(source.vocab_size()),
                body: self.global.body.clone(),
                tok_emb,
                pos_emb,
            });
        }
        match &source.trim {
            Some(trim) => slice_token_embeddings(&self.global, trim),
            None => Ok(self.global.clone()),
        }
    }

    /// L2 norm of the parameters kept globally (the body alone for SPEC).
    pub fn global_param_norm(&self) -> f64 {
        if self.cfg.variant.is_specialized() {
            l2_norm(self.global.body.tensors())
        } else {
            param_l2_norm(&self.global)
        }
    }

    fn run_worker(&self, k: usize, round: u64) -> Result<WorkerOutput<T>> {
        let source = &self.workload.sources[k];
        let before = self.source_params(k)?;
        let mut opt = SplitAdamW::fresh(&before);
        if let Some(st) = &self.states[k].private_opt {
            opt.emb = st.clone();
        }
        let mut after = before.clone();
        let mut r = rng::stream(self.cfg.seed, "batch", round, k as u64);
        let n = self.cfg.local_steps;
        let stats =
            inner_opt(&mut after, &mut opt, &source.train, self.cfg.batch_size, &self.schedule, round * n, n, &mut r, &self.hp)?;
        let emb_len = (before.tok_emb.len() + before.pos_emb.len()) as u64;
        if self.cfg.variant.is_specialized() {
            let delta = compute_body_delta(k, &before.body, &after.body)?;
            Ok(WorkerOutput {
                source_id: k,
                delta,
                stats,
                private: Some((after.tok_emb, after.pos_emb, opt.emb)),
                download: before.body.param_count(),
                download_embeddings: 0,
            })
        } else {
            let delta = compute_delta(k, &before, &after, source.trim.as_ref())?;
            Ok(WorkerOutput {
                source_id: k,
                delta,
                stats,
                private: None,
                download: before.param_count(),
                download_embeddings: emb_len,
            })
        }
    }

    /// Runs one round: select, train in parallel, aggregate, evaluate.
    pub fn step_round(&mut self) -> Result<Vec<MetricsRecord>> {
        let round = self.round;
        let k_total = self.workload.sources.len();
        let mut sel_rng = rng::stream(self.cfg.seed, "select", round, 0);
        let selected = sample_sources(k_total, self.cfg.selected(k_total), &mut sel_rng)?;
        let mut outputs: Vec<WorkerOutput<T>> =
            self.pool.install(|| selected.par_iter().map(|&k| self.run_worker(k, round)).collect::<Result<_>>())?;
        outputs.sort_by_key(|o| o.source_id);

        let n = self.cfg.local_steps;
        let mut deltas = Vec::with_capacity(outputs.len());
        let mut worker_losses = Vec::with_capacity(outputs.len());
        let mut act_norm = 0.0f64;
        let mut last_lr = 0.0;
        for o in outputs {
            self.counter.record_worker_round(o.download, o.download_embeddings, &o.delta, n);
            worker_losses.push(o.stats.mean_loss());
            act_norm = act_norm.max(o.stats.max_act_norm());
            last_lr = o.stats.last_lr;
            if let Some((phi, psi, opt)) = o.private {
                let st = &mut self.states[o.source_id];
                st.private_phi = Some(phi);
                st.private_psi = Some(psi);
                st.private_opt = Some(opt);
                st.initialized = true;
            }
            deltas.push(o.delta);
        }
        let next = outer_apply(&self.global, &deltas)?;
        if !next.all_finite() {
            return Err(DeptError::NonFinite(format!("global parameters after round {}", round + 1)));
        }
        self.global = next;
        self.round += 1;

        let evals = self.evaluate_sources()?;
        let mean_ppl = evals.iter().map(|e| e.ppl).sum::<f64>() / evals.len() as f64;
        let step = self.round * n;
        let mut records = vec![MetricsRecord {
            phase: "train".into(),
            round: self.round,
            step,
            source_id: None,
            loss: worker_losses.iter().sum::<f64>() / worker_losses.len() as f64,
            ppl: Some(mean_ppl),
            param_norm: self.global_param_norm(),
            act_norm,
            lr: last_lr,
            comm_bytes_cum: self.counter.total_bytes(),
        }];
        records.extend(self.eval_records(&evals, last_lr)?);
        Ok(records)
    }

    /// Validation loss and perplexity of every source under its own parameters.
    pub fn evaluate_sources(&self) -> Result<Vec<EvalStats>> {
        let bs = self.cfg.batch_size;
        self.pool.install(|| {
            (0..self.workload.sources.len())
                .into_par_iter()
                .map(|k| evaluate_dataset(&self.source_params(k)?, &self.workload.sources[k].validation, bs))
                .collect()
        })
    }

    fn eval_records(&self, evals: &[EvalStats], lr: f64) -> Result<Vec<MetricsRecord>> {
        evals
            .iter()
            .enumerate()
            .map(|(k, e)| {
                Ok(MetricsRecord {
                    phase: "eval".into(),
                    round: self.round,
                    step: self.round * self.cfg.local_steps,
                    source_id: Some(self.workload.sources[k].name.clone()),
                    loss: e.loss,
                    ppl: Some(e.ppl),
                    param_norm: param_l2_norm(&self.source_params(k)?),
                    act_norm: e.act_norm,
                    lr,
                    comm_bytes_cum: self.counter.total_bytes(),
                })
            })
            .collect()
    }

    /// Evaluation records before any training.
    pub fn initial_records(&self) -> Result<Vec<MetricsRecord>> {
        let evals = self.evaluate_sources()?;
        self.eval_records(&evals, 0.0)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.global.arch);
        c.meta = serde_json::json!({
            "kind": "dept",
            "variant": self.cfg.variant,
            "seed": self.cfg.seed,
            "round": self.round,
            "counter": self.counter,
        });
        c.insert_params("global.", &self.global);
        let emb_names = ["phi".to_string(), "psi".to_string()];
        for st in self.states.iter().filter(|s| s.initialized) {
            let prefix = format!("src.{}.", st.source_id);
            if let (Some(phi), Some(psi), Some(opt)) = (&st.private_phi, &st.private_psi, &st.private_opt) {
                c.insert(format!("{prefix}phi"), phi);
                c.insert(format!("{prefix}psi"), psi);
                c.insert_opt(&prefix, &emb_names, opt);
            }
        }
        Ok(c)
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        if c.meta["kind"] != "dept" || c.meta["variant"] != serde_json::to_value(self.cfg.variant)? {
            return Err(DeptError::Format(format!("checkpoint is not a {} run", self.cfg.variant)));
        }
        if c.meta["seed"] != self.cfg.seed {
            return Err(DeptError::Format("checkpoint was written with a different seed".into()));
        }
        let round = c.meta["round"].as_u64().ok_or_else(|| DeptError::Format("checkpoint lacks a round".into()))?;
        if round > self.cfg.rounds {
            return Err(DeptError::Format(format!("checkpoint at round {round} beyond the configured {}", self.cfg.rounds)));
        }
        self.counter = serde_json::from_value(c.meta["counter"].clone())?;
        self.global = c.get_params("global.", self.workload.arch)?;
        let emb_names = ["phi".to_string(), "psi".to_string()];
        for st in &mut self.states {
            let prefix = format!("src.{}.", st.source_id);
            *st = SourceState::new(st.source_id);
            if c.contains(&format!("{prefix}phi")) {
                st.private_phi = Some(c.get(&format!("{prefix}phi"))?);
                st.private_psi = Some(c.get(&format!("{prefix}psi"))?);
                st.private_opt = Some(c.get_opt(&prefix, &emb_names)?);
                st.initialized = true;
            }
        }
        self.round = round;
        Ok(())
    }

    pub fn into_result(self, metrics: Vec<MetricsRecord>) -> TrainRunResult<T> {
        let private = if self.cfg.variant.is_specialized() {
            (0..self.states.len()).map(|k| Some(self.private_or_initial(k))).collect()
        } else {
            vec![None; self.states.len()]
        };
        TrainRunResult {
            variant: self.cfg.variant,
            params: self.global,
            private,
            metrics,
            counter: self.counter,
            steps_completed: self.round * self.cfg.local_steps,
            rounds_completed: self.round,
            selected_step: None,
        }
    }
}

