//! Experiment configuration files (TOML, strict schema, versioned).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dept_core::dept::{InitMode, SamplingPolicy, TrainHyper, VariantConfig};
use dept_core::model::Architecture;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub paths: Paths,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub run: VariantConfig,
    pub schedule: TrainHyper,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub continued: ContinuedConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Source ids; each needs `<id>.train.txt` and `<id>.validation.txt` in the data directory.
    pub sources: Vec<String>,
    pub global_vocab: usize,
    #[serde(default = "default_spec_opt_vocab")]
    pub spec_opt_vocab: usize,
}

fn default_spec_opt_vocab() -> usize {
    64
}

/// [`Architecture`] without the vocabulary size, which preparation decides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub expansion_ratio: usize,
    pub seq_len: usize,
}

impl ArchConfig {
    pub fn with_vocab(self, vocab_size: usize) -> Architecture {
        Architecture {
            num_blocks: self.num_blocks,
            d_model: self.d_model,
            num_heads: self.num_heads,
            expansion_ratio: self.expansion_ratio,
            seq_len: self.seq_len,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Rounds between checkpoints; the final round is always saved.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuedConfig {
    /// N_CT as a fraction of the run's N.
    pub fraction: f64,
    pub policy: SamplingPolicy,
    pub init: InitMode,
    /// Defaults to the run's batch size.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for ContinuedConfig {
    fn default() -> Self {
        Self { fraction: 0.15, policy: SamplingPolicy::Uniform, init: InitMode::Pretrained, batch_size: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub ood_sources: Vec<String>,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub plasticity: Option<PlasticityConfig>,
}

fn default_eval_batch() -> usize {
    32
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ood_sources: Vec::new(), batch_size: default_eval_batch(), plasticity: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasticityConfig {
    /// Source id of the adaptation target, read from the data directory.
    pub target: String,
    pub steps: u64,
    pub record_every: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.into()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::Config)?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| CliError::Config(e.into_inner().context(format!("in {}", path.display()))))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.data_dir = base.join(&cfg.paths.data_dir);
        cfg.paths.out_dir = base.join(&cfg.paths.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.check().map_err(CliError::Config)
    }

    fn check(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("unsupported config version {} (expected {CONFIG_VERSION})", self.version);
        }
        let d = &self.data;
        if d.sources.is_empty() {
            bail!("data.sources is empty");
        }
        let mut names: Vec<&String> = d.sources.iter().chain(&self.eval.ood_sources).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("source {:?} listed twice", w[0]);
        }
        if let Some(bad) = names.iter().find(|n| n.is_empty() || n.contains(['/', '\\', '.'])) {
            bail!("source id {bad:?} must be a plain name");
        }
        self.arch.with_vocab(d.global_vocab).validate()?;
        self.run.validate(d.sources.len())?;
        dept_core::dept::ct_steps(self.continued.fraction, self.run.total_steps())?;
        if self.continued.batch_size == Some(0) || self.eval.batch_size == 0 {
            bail!("batch sizes must be >= 1");
        }
        if let Some(p) = &self.eval.plasticity {
            if p.record_every == 0 || p.steps < p.record_every {
                bail!("plasticity needs steps >= record_every >= 1");
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical form of every field that affects results.
    /// The output directory is excluded.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.paths.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&semantic).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.paths.out_dir.join("prepared")
    }

    pub fn ct_batch_size(&self) -> usize {
        self.continued.batch_size.unwrap_or(self.run.batch_size)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
