use std::path::{Path, PathBuf};
use std::process::Command;

use dept_cli::costs::experiment_costs;
use dept_cli::evaluate::cmd_eval;
use dept_cli::prepare::{cmd_prepare, load_prepared};
use dept_cli::synth::cmd_synth;
use dept_cli::train::{cmd_train, RunManifest, RunStatus, TrainOptions};
use dept_cli::ExperimentConfig;
use dept_core::corpus::{Split, Vocab};
use dept_core::dept::{build_global_vocab, build_workload, desk_corpora, SourceCorpora};
use dept_core::corpus::Corpus;

const TINY: &str = r#"
version = 1

[paths]
data_dir = "data"
out_dir = "run"

[data]
sources = ["alpha", "beta", "gamma", "mixed"]
global_vocab = 300
spec_opt_vocab = 48

[arch]
num_blocks = 1
d_model = 16
num_heads = 2
expansion_ratio = 2
seq_len = 8

[run]
variant = "VARIANT"
rounds = 3
local_steps = 4
batch_size = 4
seed = 5
EXTRA

[schedule]
peak_lr = 0.003
alpha = 0.1

[output]
checkpoint_every = 1

[continued]
fraction = 0.25
policy = "proportional"
init = "pretrained"

[eval]
ood_sources = ["delta"]
batch_size = 16

[eval.plasticity]
target = "delta"
steps = 6
record_every = 3
"#;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dept")
}

fn text(variant: &str) -> String {
    let extra = match variant {
        "ACT" => "forget_every = 5",
        "STD" => "tau = 0.3",
        _ => "",
    };
    TINY.replace("VARIANT", variant).replace("EXTRA", extra)
}

/// Writes the config into `dir`, generates data once per directory, and
/// returns the loaded config.
fn setup(dir: &Path, variant: &str) -> (PathBuf, ExperimentConfig) {
    let path = dir.join(format!("{variant}.toml"));
    std::fs::write(&path, text(variant).replace("\"run\"", &format!("\"run-{variant}\""))).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    if !cfg.paths.data_dir.join("alpha.train.txt").exists() {
        cmd_synth(&cfg).unwrap();
    }
    (path, cfg)
}

fn mtimes(files: &[PathBuf]) -> Vec<std::time::SystemTime> {
    files.iter().map(|f| std::fs::metadata(f).unwrap().modified().unwrap()).collect()
}

#[test]
fn prepare_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), "SPEC");
    let first = cmd_prepare(&cfg).unwrap();
    assert!(!first.skipped);
    let before = mtimes(&first.files);
    std::thread::sleep(std::time::Duration::from_millis(20));
    let again = cmd_prepare(&cfg).unwrap();
    assert!(again.skipped);
    assert_eq!(first.files, again.files);
    assert_eq!(before, mtimes(&again.files));
}

#[test]
fn vocabulary_files_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let count = |cfg: &ExperimentConfig| {
        std::fs::read_dir(cfg.prepared_dir())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "vocab"))
            .count()
    };
    let (_, glob) = setup(dir.path(), "GLOB");
    cmd_prepare(&glob).unwrap();
    assert_eq!(count(&glob), 1);

    let (_, opt) = setup(dir.path(), "SPEC_OPT");
    cmd_prepare(&opt).unwrap();
    assert_eq!(count(&opt), 5);
    for s in &opt.data.sources {
        let v = Vocab::load(&opt.prepared_dir().join(format!("{s}.vocab"))).unwrap();
        assert_eq!(v.len(), 48);
    }
}

#[test]
fn prepared_workload_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for variant in ["GLOB", "TRIM", "SPEC_OPT"] {
        let (_, cfg) = setup(dir.path(), variant);
        cmd_prepare(&cfg).unwrap();
        let loaded = load_prepared(&cfg).unwrap();
        let corpora: Vec<SourceCorpora> = cfg
            .data
            .sources
            .iter()
            .map(|s| SourceCorpora {
                name: s.clone(),
                train: Corpus::load(&cfg.paths.data_dir, s, Split::Train).unwrap(),
                validation: Corpus::load(&cfg.paths.data_dir, s, Split::Validation).unwrap(),
            })
            .collect();
        let global = build_global_vocab(&corpora, cfg.data.global_vocab).unwrap();
        let arch = cfg.arch.with_vocab(global.len());
        let direct = build_workload(cfg.run.variant, arch, global, &corpora, cfg.data.spec_opt_vocab).unwrap();
        assert_eq!(loaded.workload, direct, "{variant}");
    }
    let _ = desk_corpora;
}

#[test]
fn stale_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), "GLOB");
    cmd_prepare(&cfg).unwrap();
    let path = cfg.paths.data_dir.join("beta.train.txt");
    let mut raw = std::fs::read_to_string(&path).unwrap();
    raw.push_str("\nijk lmn\n");
    std::fs::write(&path, raw).unwrap();
    assert_eq!(load_prepared(&cfg).unwrap_err().exit_code(), 3);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    for variant in ["TRIM", "STD"] {
        let (_, cfg) = setup(dir.path(), variant);
        cmd_prepare(&cfg).unwrap();
        let metrics = cfg.paths.out_dir.join("metrics.jsonl");

        cmd_train(&cfg, &TrainOptions { workers: 2, ..Default::default() }).unwrap();
        let full = std::fs::read(&metrics).unwrap();
        assert_eq!(RunManifest::load(&cfg.paths.out_dir).unwrap().status, RunStatus::Complete);
        cmd_train(&cfg, &TrainOptions { workers: 1, ..Default::default() }).unwrap();
        assert_eq!(full, std::fs::read(&metrics).unwrap(), "{variant}: rerun differs");

        std::fs::remove_dir_all(cfg.paths.out_dir.join("checkpoints")).unwrap();
        cmd_train(&cfg, &TrainOptions { workers: 1, stop_after: Some(1), ..Default::default() }).unwrap();
        assert_eq!(RunManifest::load(&cfg.paths.out_dir).unwrap().status, RunStatus::Interrupted);
        let ckpt = cfg.paths.out_dir.join("checkpoints/round-0001.ckpt");
        cmd_train(&cfg, &TrainOptions { workers: 3, resume: Some(ckpt.clone()), ..Default::default() }).unwrap();
        let resumed = std::fs::read_to_string(&metrics).unwrap();
        let full_text = String::from_utf8(full.clone()).unwrap();
        for (a, b) in full_text.lines().zip(resumed.lines()) {
            assert_eq!(a, b, "{variant}: resumed run differs");
        }
        assert_eq!(full_text.lines().count(), resumed.lines().count(), "{variant}");
        let manifest = RunManifest::load(&cfg.paths.out_dir).unwrap();
        assert_eq!(manifest.resumed_from, Some(ckpt));
        assert_eq!(manifest.config_hash, cfg.hash());
    }
}

#[test]
fn eval_reports_and_costs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), "SPEC");
    cmd_prepare(&cfg).unwrap();
    cmd_train(&cfg, &TrainOptions { workers: 2, ..Default::default() }).unwrap();

    let out = cmd_eval(&cfg, None).unwrap();
    assert_eq!(out.pre.rows.len(), 5);
    assert_eq!(out.pre.ppl("delta"), None);
    let post = out.post.unwrap();
    assert!(post.ppl("delta").is_some_and(|p| p >= 1.0));
    let ct = out.ct.unwrap();
    assert_eq!(ct.steps, 3);
    assert_eq!(ct.init, dept_core::dept::InitMode::Random);
    let csv = cfg.paths.out_dir.join("eval/report.csv");
    let first = std::fs::read(&csv).unwrap();
    cmd_eval(&cfg, None).unwrap();
    assert_eq!(first, std::fs::read(&csv).unwrap());
    assert!(cfg.paths.out_dir.join("eval/report.md").is_file());

    let costs = experiment_costs(&cfg).unwrap();
    assert_eq!(costs.agrees(), Some(true));
    assert_eq!(costs.measured.unwrap().embedding_params_exchanged(), 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, cfg) = setup(dir.path(), "GLOB");
    let run = |args: &[&str], cfg_path: &Path| {
        Command::new(bin()).args(args).arg("--config").arg(cfg_path).output().unwrap()
    };

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, text("GLOB").replace("seed = 5", "seed = 5\nsede = 1")).unwrap();
    assert_eq!(run(&["prepare"], &typo).status.code(), Some(2));

    let missing = dir.path().join("missing.toml");
    std::fs::write(&missing, text("GLOB").replace("\"gamma\"", "\"nowhere\"")).unwrap();
    let out = run(&["prepare"], &missing);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.train.txt"));

    assert_eq!(run(&["train"], &path).status.code(), Some(3), "train before prepare");
    assert_eq!(run(&["prepare"], &path).status.code(), Some(0));

    let hot = dir.path().join("hot.toml");
    std::fs::write(&hot, text("GLOB").replace("peak_lr = 0.003", "peak_lr = 1e300")).unwrap();
    assert_eq!(run(&["prepare"], &hot).status.code(), Some(0));
    let out = run(&["train"], &hot);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = RunManifest::load(&dir.path().join("run")).unwrap();
    assert_eq!(manifest.status, RunStatus::Failed);
    assert!(manifest.error.is_some());
    let _ = cfg;

    let costs = Command::new(bin())
        .args(["costs", "--config"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference_costs.toml"))
        .output()
        .unwrap();
    assert_eq!(costs.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&costs.stdout);
    assert!(stdout.contains("0.556M") && !stdout.contains("MISMATCH"));
}
