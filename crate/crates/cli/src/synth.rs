//! `synth`: writes the synthetic desk corpora into a config's data directory.

use dept_core::corpus::synthetic::desk_ood_source;
use dept_core::dept::{desk_corpora, synthetic_corpora};

use crate::config::ExperimentConfig;
use crate::error::CliResult;

/// Returns the source ids written.
pub fn cmd_synth(cfg: &ExperimentConfig) -> CliResult<Vec<String>> {
    let dir = &cfg.paths.data_dir;
    std::fs::create_dir_all(dir)?;
    let seed = cfg.run.seed;
    let mut all = desk_corpora(seed);
    all.push(synthetic_corpora(&desk_ood_source(), seed));
    for c in &all {
        c.train.save(dir)?;
        c.validation.save(dir)?;
    }
    Ok(all.into_iter().map(|c| c.name).collect())
}
