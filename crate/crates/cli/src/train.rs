//! `train`: runs the configured method and persists metrics, checkpoints and
//! the run manifest.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use dept_core::dept::{read_jsonl, train, write_jsonl, RunOptions};
use dept_core::model::Checkpoint;
use dept_core::RunResult64;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::prepare::load_prepared;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Interrupted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub final_checkpoint: PathBuf,
    pub counter: PathBuf,
    pub eval_dir: PathBuf,
}

/// Written before training starts. Only `status` changes afterwards, once,
/// when the run ends; anything but `complete` marks the outputs as partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub workers: usize,
    pub resumed_from: Option<PathBuf>,
    pub artifacts: Artifacts,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load(out_dir: &Path) -> CliResult<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(Self::path(out_dir))?)?)
    }

    fn save(&self, out_dir: &Path) -> CliResult<()> {
        std::fs::write(Self::path(out_dir), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn artifacts(cfg: &ExperimentConfig) -> Artifacts {
    let out = &cfg.paths.out_dir;
    let checkpoints = out.join("checkpoints");
    Artifacts {
        metrics: out.join("metrics.jsonl"),
        final_checkpoint: dept_core::dept::checkpoint_path(&checkpoints, cfg.run.rounds),
        checkpoints,
        counter: out.join("counter.json"),
        eval_dir: out.join("eval"),
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub workers: usize,
    pub resume: Option<PathBuf>,
    /// Stop after this many rounds, as if interrupted.
    pub stop_after: Option<u64>,
}

/// Global step a checkpoint was taken at.
fn checkpoint_step(cfg: &ExperimentConfig, c: &Checkpoint) -> CliResult<u64> {
    let field = |k: &str| c.meta[k].as_u64().ok_or_else(|| CliError::Data(anyhow!("checkpoint lacks {k}")));
    match c.meta["kind"].as_str() {
        Some("dept") => Ok(field("round")? * cfg.run.local_steps),
        Some("baseline") => field("step"),
        _ => Err(CliError::Data(anyhow!("not a training checkpoint"))),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> CliResult<RunResult64> {
    let prepared = load_prepared(cfg)?;
    let out = &cfg.paths.out_dir;
    std::fs::create_dir_all(out)?;
    let art = artifacts(cfg);
    let resume = match &opts.resume {
        Some(p) => Some(Checkpoint::load(p).map_err(|e| CliError::Data(anyhow!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        variant: cfg.run.variant.to_string(),
        workers: opts.workers.max(1),
        resumed_from: opts.resume.clone(),
        artifacts: art.clone(),
        status: RunStatus::Running,
        error: None,
    };
    manifest.save(out)?;

    let prefix = match &resume {
        Some(c) => {
            let step = checkpoint_step(cfg, c)?;
            let old = if art.metrics.is_file() { read_jsonl(&art.metrics)? } else { Vec::new() };
            old.into_iter().filter(|r| r.step <= step).collect()
        }
        None => Vec::new(),
    };
    let run_opts = RunOptions {
        workers: opts.workers.max(1),
        checkpoint_every: cfg.output.checkpoint_every,
        checkpoint_dir: Some(art.checkpoints.clone()),
        stop_after: opts.stop_after,
    };
    std::fs::create_dir_all(&art.checkpoints)?;
    let outcome = train::<f64>(&cfg.run, &cfg.schedule, &prepared.workload, &run_opts, resume.as_ref());
    let result = match outcome {
        Ok(r) => r,
        Err(e) => {
            let err = CliError::from(e);
            manifest.status = RunStatus::Failed;
            manifest.error = Some(err.to_string());
            manifest.save(out)?;
            return Err(err);
        }
    };
    let mut metrics = prefix;
    metrics.extend(result.metrics.iter().cloned());
    write_jsonl(&art.metrics, &metrics)?;
    std::fs::write(&art.counter, serde_json::to_string_pretty(&result.counter)? + "\n")?;
    manifest.status =
        if result.rounds_completed >= cfg.run.rounds { RunStatus::Complete } else { RunStatus::Interrupted };
    manifest.save(out)?;
    Ok(result)
}
