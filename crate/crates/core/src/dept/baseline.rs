//! Centralized baselines: STD with temperature-weighted source sampling, and
//! ACT, which additionally re-initializes the embeddings every
//! `forget_every` steps.

use rand::distr::weighted::WeightedIndex;
use rayon::prelude::*;
use rayon::ThreadPool;

use super::config::{TrainHyper, VariantConfig};
use super::metrics::MetricsRecord;
use super::setup::Workload;
use super::train::{check_dataset, draw_mixture_batch, fresh_embedding_state, mixture, train_step, SplitAdamW};
use super::{thread_pool, TrainRunResult};
use crate::corpus::{temperature_weights, TokenizedDataset};
use crate::costs::CommCounter;
use crate::error::{DeptError, Result};
use crate::eval::{evaluate_dataset, EvalStats};
use crate::model::{init_embedding, init_params, param_l2_norm, Checkpoint, ModelParams};
use crate::optim::CosineSchedule;
use crate::rng;
use crate::scalar::Scalar;
use crate::variant::Variant;

/// Replaces φ and ψ with fresh draws from the init distribution for
/// forgetting cycle `cycle`; the body is untouched.
pub fn act_reset<T: Scalar>(params: &mut ModelParams<T>, seed: u64, cycle: u64) {
    let mut r = rng::stream(seed, "forget", cycle, 0);
    params.tok_emb = init_embedding(params.vocab_size(), params.arch.d_model, &mut r);
    params.pos_emb = init_embedding(params.arch.seq_len, params.arch.d_model, &mut r);
}

pub struct BaselineRun<'w, T> {
    pub cfg: VariantConfig,
    pub hp: TrainHyper,
    pub workload: &'w Workload,
    pub params: ModelParams<T>,
    pub opt: SplitAdamW<T>,
    /// Steps completed.
    pub step: u64,
    pub counter: CommCounter,
    /// ACT: best parameters seen at a forgetting boundary, their step and mean perplexity.
    pub best: Option<(ModelParams<T>, u64, f64)>,
    schedule: CosineSchedule,
    emb_schedule: Option<CosineSchedule>,
    dist: WeightedIndex<f64>,
    pool: ThreadPool,
}

impl<'w, T: Scalar> BaselineRun<'w, T> {
    pub fn new(cfg: VariantConfig, hp: TrainHyper, workload: &'w Workload, workers: usize) -> Result<Self> {
        if !cfg.variant.is_baseline() {
            return Err(DeptError::InvalidArgument(format!("{} is not a baseline", cfg.variant)));
        }
        cfg.validate(workload.sources.len())?;
        let params = init_params(workload.arch, cfg.seed)?;
        for s in &workload.sources {
            check_dataset(&params, &s.global_train)?;
        }
        let sizes: Vec<usize> = workload.sources.iter().map(|s| s.global_train.len()).collect();
        let dist = mixture(&temperature_weights(&sizes, cfg.tau())?)?;
        let schedule = hp.schedule(cfg.total_steps())?;
        let emb_schedule = match cfg.forget_every {
            Some(f) if cfg.variant == Variant::Act => Some(hp.schedule(f.min(cfg.total_steps()))?),
            _ => None,
        };
        Ok(Self {
            opt: SplitAdamW::fresh(&params),
            params,
            cfg,
            hp,
            workload,
            step: 0,
            counter: CommCounter::default(),
            best: None,
            schedule,
            emb_schedule,
            dist,
            pool: thread_pool(workers)?,
        })
    }

    /// Body and embedding learning rates for 0-based step `s`.
    pub fn learning_rates(&self, s: u64) -> (f64, f64) {
        let body = self.schedule.lr(s + 1);
        match (self.emb_schedule, self.cfg.forget_every) {
            (Some(es), Some(f)) => (body, es.lr(s % f + 1)),
            _ => (body, body),
        }
    }

    fn train_sets(&self) -> Vec<&TokenizedDataset> {
        self.workload.global_train_sets()
    }

    pub fn evaluate_sources(&self, params: &ModelParams<T>) -> Result<Vec<EvalStats>> {
        let bs = self.cfg.batch_size;
        self.pool.install(|| {
            self.workload
                .sources
                .par_iter()
                .map(|s| evaluate_dataset(params, &s.global_validation, bs))
                .collect()
        })
    }

    fn consider_best(&mut self) -> Result<()> {
        let evals = self.evaluate_sources(&self.params)?;
        let mean = evals.iter().map(|e| e.ppl).sum::<f64>() / evals.len() as f64;
        if self.best.as_ref().is_none_or(|(_, _, b)| mean < *b) {
            self.best = Some((self.params.clone(), self.step, mean));
        }
        Ok(())
    }

    /// One synchronized step, with ACT's forgetting applied first when due.
    pub fn step_once(&mut self) -> Result<MetricsRecord> {
        let s = self.step;
        if let Some(f) = self.cfg.forget_every.filter(|_| self.cfg.variant == Variant::Act) {
            if s > 0 && s % f == 0 {
                self.consider_best()?;
                act_reset(&mut self.params, self.cfg.seed, s / f);
                self.opt.emb = fresh_embedding_state(&self.params);
            }
        }
        let mut r = rng::stream(self.cfg.seed, "std-batch", s, 0);
        let batch = draw_mixture_batch(&self.train_sets(), &self.dist, self.cfg.batch_size, &mut r);
        let (body_lr, emb_lr) = self.learning_rates(s);
        let st = train_step(&mut self.params, &mut self.opt, &batch, body_lr, emb_lr, &self.hp)?;
        let emb = (self.params.tok_emb.len() + self.params.pos_emb.len()) as u64;
        self.counter.record_sync_step(self.params.param_count(), emb);
        self.step += 1;
        Ok(MetricsRecord {
            phase: "train".into(),
            round: self.step.div_ceil(self.cfg.local_steps),
            step: self.step,
            source_id: None,
            loss: st.loss,
            ppl: None,
            param_norm: param_l2_norm(&self.params),
            act_norm: st.act_norm,
            lr: body_lr,
            comm_bytes_cum: self.counter.total_bytes(),
        })
    }

    pub fn eval_records(&self) -> Result<Vec<MetricsRecord>> {
        let evals = self.evaluate_sources(&self.params)?;
        let lr = if self.step == 0 { 0.0 } else { self.schedule.lr(self.step) };
        let norm = param_l2_norm(&self.params);
        Ok(evals
            .iter()
            .zip(&self.workload.sources)
            .map(|(e, src)| MetricsRecord {
                phase: "eval".into(),
                round: self.step / self.cfg.local_steps,
                step: self.step,
                source_id: Some(src.name.clone()),
                loss: e.loss,
                ppl: Some(e.ppl),
                param_norm: norm,
                act_norm: e.act_norm,
                lr,
                comm_bytes_cum: self.counter.total_bytes(),
            })
            .collect())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.params.arch);
        c.meta = serde_json::json!({
            "kind": "baseline",
            "variant": self.cfg.variant,
            "seed": self.cfg.seed,
            "step": self.step,
            "counter": self.counter,
            "best": self.best.as_ref().map(|(_, step, ppl)| serde_json::json!({"step": step, "ppl": ppl})),
        });
        c.insert_params("", &self.params);
        c.insert_opt("", &self.params.body.names(), &self.opt.body);
        c.insert_opt("emb.", &["phi".to_string(), "psi".to_string()], &self.opt.emb);
        if let Some((best, _, _)) = &self.best {
            c.insert_params("best.", best);
        }
        Ok(c)
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        if c.meta["kind"] != "baseline" || c.meta["variant"] != serde_json::to_value(self.cfg.variant)? {
            return Err(DeptError::Format(format!("checkpoint is not a {} run", self.cfg.variant)));
        }
        if c.meta["seed"] != self.cfg.seed {
            return Err(DeptError::Format("checkpoint was written with a different seed".into()));
        }
        let step = c.meta["step"].as_u64().ok_or_else(|| DeptError::Format("checkpoint lacks a step".into()))?;
        self.counter = serde_json::from_value(c.meta["counter"].clone())?;
        self.params = c.get_params("", self.workload.arch)?;
        self.opt.body = c.get_opt("", &self.params.body.names())?;
        self.opt.emb = c.get_opt("emb.", &["phi".to_string(), "psi".to_string()])?;
        self.best = match c.meta["best"].as_object() {
            Some(b) => {
                let best_step = b["step"].as_u64().unwrap_or(0);
                let ppl = b["ppl"].as_f64().unwrap_or(f64::INFINITY);
                Some((c.get_params("best.", self.workload.arch)?, best_step, ppl))
            }
            None => None,
        };
        self.step = step;
        Ok(())
    }

    /// Final parameters; for ACT, the best of the forgetting boundaries and the end of the run.
    pub fn into_result(mut self, metrics: Vec<MetricsRecord>) -> Result<TrainRunResult<T>> {
        let mut selected_step = None;
        if self.cfg.variant == Variant::Act {
            self.consider_best()?;
            if let Some((best, step, _)) = self.best.take() {
                self.params = best;
                selected_step = Some(step);
            }
        }
        Ok(TrainRunResult {
            variant: self.cfg.variant,
            params: self.params,
            private: vec![None; self.workload.sources.len()],
            metrics,
            counter: self.counter,
            steps_completed: self.step,
            rounds_completed: self.step / self.cfg.local_steps,
            selected_step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn reset_redraws_embeddings_only() {
        let arch = Architecture { num_blocks: 1, d_model: 16, num_heads: 2, expansion_ratio: 2, seq_len: 8, vocab_size: 300 };
        let p0 = init_params::<f64>(arch, 0).unwrap();
        let mut p = p0.clone();
        p.tok_emb.data_mut().iter_mut().for_each(|x| *x *= 40.0);
        act_reset(&mut p, 0, 3);
        assert_eq!(p.body, p0.body);
        assert_ne!(p.tok_emb, p0.tok_emb);
        let data = p.tok_emb.data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let std = (data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / data.len() as f64).sqrt();
        assert!(mean.abs() < 0.002);
        assert!((std - 0.02).abs() < 0.002);
        let mut q = p0.clone();
        act_reset(&mut q, 0, 3);
        assert_eq!(q.tok_emb, p.tok_emb);
    }
}
