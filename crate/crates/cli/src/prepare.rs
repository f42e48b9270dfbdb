//! `prepare`: vocabularies, trim maps and tokenized splits on disk.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use dept_core::corpus::{tokenize, Corpus, Split, TokenizedDataset, TrimMap, Vocab};
use dept_core::dept::{build_global_vocab, build_workload, OodData, SourceCorpora, SourceData, Workload};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::error::{CliError, CliResult};

const STAMP: &str = "prepare.json";

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    hash: String,
    files: Vec<String>,
}

#[derive(Debug)]
pub struct PrepareOutcome {
    /// True when the stamp matched and nothing was written.
    pub skipped: bool,
    pub files: Vec<PathBuf>,
}

/// Everything a run reads back from the prepared directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub workload: Workload,
    pub ood: Vec<OodData>,
    /// Plasticity target (train, validation) under the global vocabulary.
    pub plasticity: Option<(TokenizedDataset, TokenizedDataset)>,
}

fn raw_files(cfg: &ExperimentConfig) -> Vec<(String, Split, PathBuf)> {
    let dir = &cfg.paths.data_dir;
    let mut want: BTreeSet<(String, Split)> = BTreeSet::new();
    for s in &cfg.data.sources {
        want.insert((s.clone(), Split::Train));
        want.insert((s.clone(), Split::Validation));
    }
    for s in &cfg.eval.ood_sources {
        want.insert((s.clone(), Split::Validation));
    }
    if let Some(p) = &cfg.eval.plasticity {
        want.insert((p.target.clone(), Split::Train));
        want.insert((p.target.clone(), Split::Validation));
    }
    want.into_iter().map(|(s, split)| {
        let path = Corpus::path(dir, &s, split);
        (s, split, path)
    }).collect()
}

/// Hash over the inputs preparation depends on: raw file contents and the
/// config fields that shape vocabularies and tokenization.
fn input_hash(cfg: &ExperimentConfig, raw: &[(String, Split, PathBuf)]) -> CliResult<String> {
    let key = serde_json::json!({
        "variant": cfg.run.variant,
        "sources": cfg.data.sources,
        "ood": cfg.eval.ood_sources,
        "plasticity": cfg.eval.plasticity.as_ref().map(|p| &p.target),
        "global_vocab": cfg.data.global_vocab,
        "spec_opt_vocab": cfg.data.spec_opt_vocab,
        "seq_len": cfg.arch.seq_len,
    });
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&key)?);
    for (name, split, path) in raw {
        h.update(format!("\n{name}.{split}\n").as_bytes());
        h.update(std::fs::read(path)?);
    }
    Ok(hex(&h.finalize()))
}

fn check_raw(raw: &[(String, Split, PathBuf)]) -> CliResult<()> {
    let missing: Vec<String> = raw.iter().filter(|r| !r.2.is_file()).map(|r| r.2.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(anyhow!("missing corpus files: {}", missing.join(", "))))
    }
}

fn stamp_matches(dir: &Path, hash: &str) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join(STAMP)) else { return false };
    let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else { return false };
    stamp.hash == hash && stamp.files.iter().all(|f| dir.join(f).is_file())
}

fn load_corpora(cfg: &ExperimentConfig, name: &str) -> CliResult<SourceCorpora> {
    let dir = &cfg.paths.data_dir;
    let load = |split| Corpus::load(dir, name, split).map_err(|e| CliError::Data(anyhow!("{name}.{split}: {e}")));
    Ok(SourceCorpora { name: name.to_string(), train: load(Split::Train)?, validation: load(Split::Validation)? })
}

fn load_validation(cfg: &ExperimentConfig, name: &str) -> CliResult<Corpus> {
    Corpus::load(&cfg.paths.data_dir, name, Split::Validation)
        .map_err(|e| CliError::Data(anyhow!("{name}.validation: {e}")))
}

fn tok_name(source: &str, part: &str) -> String {
    format!("{source}.{part}.tok")
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn put(&mut self, name: String, contents: String) -> CliResult<()> {
        std::fs::write(self.dir.join(&name), contents)?;
        self.files.push(name);
        Ok(())
    }
}

pub fn cmd_prepare(cfg: &ExperimentConfig) -> CliResult<PrepareOutcome> {
    let raw = raw_files(cfg);
    check_raw(&raw)?;
    let hash = input_hash(cfg, &raw)?;
    let dir = cfg.prepared_dir();
    if stamp_matches(&dir, &hash) {
        let stamp: Stamp = serde_json::from_str(&std::fs::read_to_string(dir.join(STAMP))?)?;
        return Ok(PrepareOutcome { skipped: true, files: stamp.files.iter().map(|f| dir.join(f)).collect() });
    }
    std::fs::create_dir_all(&dir)?;
    let corpora = cfg.data.sources.iter().map(|s| load_corpora(cfg, s)).collect::<CliResult<Vec<_>>>()?;
    let global = build_global_vocab(&corpora, cfg.data.global_vocab)?;
    let arch = cfg.arch.with_vocab(global.len());
    let workload = build_workload(cfg.run.variant, arch, global.clone(), &corpora, cfg.data.spec_opt_vocab)?;

    let mut w = Writer { dir: &dir, files: Vec::new() };
    w.put("global.vocab".into(), global.to_text())?;
    for s in &workload.sources {
        if let Some(trim) = &s.trim {
            w.put(format!("{}.trim.json", s.name), serde_json::to_string(trim.local_to_global())?)?;
        } else if s.vocab != global {
            w.put(format!("{}.vocab", s.name), s.vocab.to_text())?;
        }
        if cfg.run.variant.uses_local_vocab() {
            w.put(tok_name(&s.name, "train"), s.train.to_text())?;
            w.put(tok_name(&s.name, "validation"), s.validation.to_text())?;
        }
        w.put(tok_name(&s.name, "global-train"), s.global_train.to_text())?;
        w.put(tok_name(&s.name, "global-validation"), s.global_validation.to_text())?;
    }
    let mut done: BTreeSet<String> = w.files.iter().cloned().collect();
    let mut put_once = |w: &mut Writer, name: String, ds: &TokenizedDataset| -> CliResult<()> {
        if done.insert(name.clone()) {
            w.put(name, ds.to_text())?;
        }
        Ok(())
    };
    for o in &cfg.eval.ood_sources {
        let ds = global_split(&load_validation(cfg, o)?, &global, cfg.arch.seq_len, o)?;
        put_once(&mut w, tok_name(o, "global-validation"), &ds)?;
    }
    if let Some(p) = &cfg.eval.plasticity {
        let c = load_corpora(cfg, &p.target)?;
        put_once(&mut w, tok_name(&p.target, "global-train"), &global_split(&c.train, &global, cfg.arch.seq_len, &p.target)?)?;
        let val = global_split(&c.validation, &global, cfg.arch.seq_len, &p.target)?;
        put_once(&mut w, tok_name(&p.target, "global-validation"), &val)?;
    }
    let stamp = Stamp { hash, files: w.files.clone() };
    std::fs::write(dir.join(STAMP), serde_json::to_string_pretty(&stamp)? + "\n")?;
    Ok(PrepareOutcome { skipped: false, files: w.files.iter().map(|f| dir.join(f)).collect() })
}

fn global_split(c: &Corpus, global: &Vocab, seq_len: usize, name: &str) -> CliResult<TokenizedDataset> {
    let ds = tokenize(c, global, seq_len)?;
    if ds.is_empty() {
        return Err(CliError::Data(anyhow!("{name} yields no full sequence of length {seq_len}")));
    }
    Ok(ds)
}

fn read_tok(dir: &Path, name: &str) -> CliResult<TokenizedDataset> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(anyhow!("{}: {e}", path.display())))?;
    Ok(TokenizedDataset::from_text(&text)?)
}

/// Reads back what [`cmd_prepare`] wrote, refusing stale artifacts.
pub fn load_prepared(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let raw = raw_files(cfg);
    check_raw(&raw)?;
    let dir = cfg.prepared_dir();
    if !stamp_matches(&dir, &input_hash(cfg, &raw)?) {
        return Err(CliError::Data(anyhow!(
            "prepared artifacts in {} are missing or stale; run `prepare` first",
            dir.display()
        )));
    }
    let global = Vocab::load(&dir.join("global.vocab"))?;
    let variant = cfg.run.variant;
    let mut sources = Vec::new();
    for (id, name) in cfg.data.sources.iter().enumerate() {
        let global_train = read_tok(&dir, &tok_name(name, "global-train"))?;
        let global_validation = read_tok(&dir, &tok_name(name, "global-validation"))?;
        let trim_path = dir.join(format!("{name}.trim.json"));
        let vocab_path = dir.join(format!("{name}.vocab"));
        let (vocab, trim) = if trim_path.is_file() {
            let indices: Vec<u32> = serde_json::from_str(&std::fs::read_to_string(&trim_path)?)?;
            let trim = TrimMap::from_indices(global.len(), indices)?;
            let tokens = trim.local_to_global().iter().map(|&g| global.tokens()[g as usize].clone()).collect();
            (Vocab::new(tokens)?, Some(trim))
        } else if vocab_path.is_file() {
            (Vocab::load(&vocab_path)?, None)
        } else {
            (global.clone(), None)
        };
        let (train, validation) = if variant.uses_local_vocab() {
            (read_tok(&dir, &tok_name(name, "train"))?, read_tok(&dir, &tok_name(name, "validation"))?)
        } else {
            (global_train.clone(), global_validation.clone())
        };
        sources.push(SourceData { id, name: name.clone(), vocab, trim, train, validation, global_train, global_validation });
    }
    let arch = cfg.arch.with_vocab(global.len());
    let workload = Workload { variant, arch, global_vocab: global, sources };
    let ood = cfg
        .eval
        .ood_sources
        .iter()
        .map(|o| Ok(OodData { name: o.clone(), validation: read_tok(&dir, &tok_name(o, "global-validation"))? }))
        .collect::<CliResult<Vec<_>>>()?;
    let plasticity = match &cfg.eval.plasticity {
        Some(p) => Some((
            read_tok(&dir, &tok_name(&p.target, "global-train"))?,
            read_tok(&dir, &tok_name(&p.target, "global-validation"))?,
        )),
        None => None,
    };
    Ok(Prepared { workload, ood, plasticity })
}
