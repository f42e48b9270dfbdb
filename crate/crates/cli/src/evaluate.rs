//! `eval` and `plasticity`: reports on a trained checkpoint.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use dept_core::dept::{
    continued_pretrain, ct_steps, load_result, CtConfig, EmbeddingInit, InitMode, SamplingPolicy,
};
use dept_core::eval::{curve_csv, evaluate_all, evaluate_global, plasticity_run, write_reports, AdaptationCurve, EvalReport};
use dept_core::model::{init_params, Checkpoint};
use dept_core::RunResult64;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::prepare::{load_prepared, Prepared};
use crate::train::artifacts;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CtSummary {
    pub steps: u64,
    pub init: InitMode,
    pub policy: SamplingPolicy,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub pre: EvalReport,
    /// Absent when N_CT rounds to zero steps.
    pub post: Option<EvalReport>,
    pub ct: Option<CtSummary>,
}

fn load_run(cfg: &ExperimentConfig, prepared: &Prepared, checkpoint: Option<&Path>) -> CliResult<RunResult64> {
    let path: PathBuf = checkpoint.map_or_else(|| artifacts(cfg).final_checkpoint, Path::to_path_buf);
    let c = Checkpoint::load(&path).map_err(|e| CliError::Data(anyhow!("{}: {e}", path.display())))?;
    Ok(load_result(&cfg.run, &cfg.schedule, &prepared.workload, &c)?)
}

/// Embedding initialization actually used: runs without global embeddings
/// always start continued pre-training from random ones.
pub fn effective_init(cfg: &ExperimentConfig, result: &RunResult64) -> InitMode {
    if result.has_global_embeddings() { cfg.continued.init } else { InitMode::Random }
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<EvalOutcome> {
    let prepared = load_prepared(cfg)?;
    let result = load_run(cfg, &prepared, checkpoint)?;
    let w = &prepared.workload;
    let batch = cfg.eval.batch_size;
    let pre = evaluate_all(&result, w, &prepared.ood, batch)?;
    let steps = ct_steps(cfg.continued.fraction, cfg.run.total_steps())?;
    let (post, ct) = if steps == 0 {
        (None, None)
    } else {
        let init_mode = effective_init(cfg, &result);
        let init = match init_mode {
            InitMode::Random => EmbeddingInit::Random,
            InitMode::Pretrained => EmbeddingInit::Pretrained {
                tok_emb: result.params.tok_emb.clone(),
                pos_emb: result.params.pos_emb.clone(),
            },
        };
        let ct_cfg = CtConfig { steps, batch_size: cfg.ct_batch_size(), policy: cfg.continued.policy, seed: cfg.run.seed };
        let out =
            continued_pretrain(&result.params.body, w.arch, init, &w.global_train_sets(), &ct_cfg, &cfg.schedule, |_, _| Ok(()))?;
        let post = evaluate_global(&result.variant.to_string(), "post-ct", &out.params, w, &prepared.ood, batch)?;
        let summary = CtSummary {
            steps,
            init: init_mode,
            policy: cfg.continued.policy,
            initial_loss: out.initial_loss(),
            final_loss: *out.losses.last().expect("at least one step"),
        };
        (Some(post), Some(summary))
    };
    let mut reports = vec![pre.clone()];
    reports.extend(post.clone());
    write_reports(&cfg.paths.out_dir, "report", &reports)?;
    if let Some(ct) = &ct {
        std::fs::write(artifacts(cfg).eval_dir.join("ct.json"), serde_json::to_string_pretty(ct)? + "\n")?;
    }
    Ok(EvalOutcome { pre, post, ct })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlasticityOutcome {
    pub trained: AdaptationCurve,
    /// The same protocol on a freshly initialized body.
    pub fresh: AdaptationCurve,
}

impl PlasticityOutcome {
    pub fn csv(&self) -> String {
        let mut out = String::from("step,trained_ppl,fresh_ppl\n");
        for ((s, a), (_, b)) in self.trained.points.iter().zip(&self.fresh.points) {
            out.push_str(&format!("{s},{a:.6},{b:.6}\n"));
        }
        out
    }
}

pub fn cmd_plasticity(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<PlasticityOutcome> {
    let p = cfg.eval.plasticity.as_ref().ok_or_else(|| CliError::Config(anyhow!("config has no [eval.plasticity] block")))?;
    let prepared = load_prepared(cfg)?;
    let (train, validation) = prepared.plasticity.as_ref().expect("prepared with a plasticity target");
    let result = load_run(cfg, &prepared, checkpoint)?;
    let arch = prepared.workload.arch;
    let batch = cfg.ct_batch_size();
    let seed = cfg.run.seed;
    let trained = plasticity_run(&result.params.body, arch, train, validation, p.steps, p.record_every, batch, seed, &cfg.schedule)?;
    let fresh_body = init_params::<f64>(arch, seed)?.body;
    let fresh = plasticity_run(&fresh_body, arch, train, validation, p.steps, p.record_every, batch, seed, &cfg.schedule)?;
    let outcome = PlasticityOutcome { trained, fresh };
    let dir = artifacts(cfg).eval_dir;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("plasticity.csv"), outcome.csv())?;
    std::fs::write(dir.join("plasticity-trained.csv"), curve_csv(&outcome.trained))?;
    Ok(outcome)
}
