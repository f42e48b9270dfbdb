//! Acceptance suite: runs every criterion at its tolerance and prints one
//! PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dept_cli::costs::{check_reference, parse_reference};
use dept_core::corpus::{temperature_weights, unigram_cross_entropy, TokenizedDataset, TrimMap};
use dept_core::costs::{format_count, format_sig, to_f64, CostRow, RowCheck};
use dept_core::dept::{
    build_global_vocab, build_workload, continued_pretrain, ct_steps, desk_corpora, draw_batch_sources, mixture, train,
    CtConfig, DeptRun, EmbeddingInit, RunOptions, SamplingPolicy, SourceCorpora, TrainHyper, VariantConfig, Workload,
};
use dept_core::model::{
    backward, forward, gather_rows, init_params, pad_embeddings, slice_token_embeddings, Architecture, Checkpoint,
    ModelParams,
};
use dept_core::optim::{clip_grad_norm, compute_delta, outer_apply, AdamWState, DeltaSet};
use dept_core::{rng, RunResult64, Variant};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk_arch() -> Architecture {
    Architecture { num_blocks: 2, d_model: 32, num_heads: 4, expansion_ratio: 4, seq_len: 16, vocab_size: 1 }
}

fn hp() -> TrainHyper {
    TrainHyper::new(3e-3, 0.1)
}

fn desk_cfg(variant: Variant, seed: u64) -> VariantConfig {
    VariantConfig {
        variant,
        rounds: 10,
        local_steps: 100,
        sources_per_round: None,
        batch_size: 8,
        tau: variant.is_baseline().then_some(0.0),
        forget_every: None,
        seed,
    }
}

struct Desk {
    corpora: Vec<SourceCorpora>,
}

impl Desk {
    fn new() -> Self {
        Self { corpora: desk_corpora(1) }
    }

    fn workload(&self, variant: Variant) -> Workload {
        let global = build_global_vocab(&self.corpora, 320).unwrap();
        build_workload(variant, desk_arch(), global, &self.corpora, 64).unwrap()
    }
}

fn cell(c: &RowCheck, column: &str) -> Option<bool> {
    c.cells.iter().find(|x| x.column == column).map(|x| x.matches)
}

fn shown(rows: &[CostRow], checks: &[RowCheck], label: &str, blocks: u32, v: Variant) -> String {
    let (_, c) = rows.iter().zip(checks).find(|(r, _)| r.label == label && r.blocks == blocks && r.variant == v).unwrap();
    let r = &c.report;
    format!(
        "{label}-{blocks} {v}: M_k {} ({}x), comms {} ({}x)",
        format_count(to_f64(r.memory_params)),
        format_sig(to_f64(r.memory_ratio), 2),
        format_count(to_f64(r.per_step_comms_params)),
        format_sig(to_f64(r.comms_ratio), 1)
    )
}

fn cost_ledger() -> Outcome {
    let start = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference_costs.toml");
    let rows = parse_reference(&std::fs::read_to_string(path).unwrap()).unwrap();
    let checks = check_reference(&rows).unwrap();
    let absolute_ok = checks.iter().all(|c| cell(c, "memory") != Some(false) && cell(c, "comms") != Some(false));
    let ratio_cells: Vec<_> = checks.iter().flat_map(|c| c.cells.iter().filter(|x| x.column.ends_with("ratio"))).collect();
    let unexplained = ratio_cells.iter().filter(|x| !x.accepted()).count();
    let documented = ratio_cells.iter().filter(|x| !x.matches && x.known_mismatch).count();
    let elapsed = start.elapsed();
    let examples = [
        ("Multilingual", 12, Variant::Glob),
        ("Multilingual", 12, Variant::Spec),
        ("Multilingual", 12, Variant::SpecOpt),
        ("Multilingual-B", 24, Variant::SpecOpt),
    ]
    .map(|(l, b, v)| shown(&rows, &checks, l, b, v));
    outcome(
        absolute_ok && unexplained == 0 && elapsed < Duration::from_secs(1),
        format!(
            "{} rows; every M_k and per-step comms cell matches at displayed rounding; {documented} ratio cells are documented \
             inconsistencies of the published table, {unexplained} unexplained; {:.1} ms [{}]",
            rows.len(),
            elapsed.as_secs_f64() * 1e3,
            examples.join("; ")
        ),
    )
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let arch = Architecture { num_blocks: 1, d_model: 8, num_heads: 2, expansion_ratio: 4, seq_len: 8, vocab_size: 20 };
    let batch = vec![vec![1, 5, 7, 2, 19, 3, 3, 0], vec![4, 4, 8, 11, 0, 1, 13, 2], vec![6, 9, 9, 10, 12, 14, 15, 16]];
    let mut p = init_params::<f64>(arch, 7).unwrap();
    let noise = init_params::<f64>(arch, 107).unwrap();
    for (t, n) in p.tensors_mut().into_iter().zip(noise.tensors()) {
        t.data_mut().iter_mut().zip(n.data()).for_each(|(x, &e)| *x += 10.0 * e);
    }
    let grads = backward(&p, forward(&p, &batch).unwrap().trace, 1.0).unwrap();
    let eps = 1e-5;
    let names = p.names();
    let mut worst = (0.0f64, String::new());
    for ti in 0..names.len() {
        let (mut diff, mut an, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..p.tensors()[ti].len() {
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data_mut()[k] += eps;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data_mut()[k] -= eps;
            let numeric = (forward(&plus, &batch).unwrap().loss - forward(&minus, &batch).unwrap().loss) / (2.0 * eps);
            let analytic = grads.tensors()[ti].data()[k];
            diff += (numeric - analytic).powi(2);
            an += analytic * analytic;
            nn += numeric * numeric;
        }
        let rel = diff.sqrt() / an.sqrt().max(nn.sqrt());
        if rel > worst.0 {
            worst = (rel, names[ti].clone());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(30),
        format!("max per-tensor relative error {:.2e} ({}) over {} tensors; {:.1} s", worst.0, worst.1, names.len(), elapsed.as_secs_f64()),
    )
}

fn params_bytes(p: &ModelParams<f64>) -> Vec<u8> {
    let mut c = Checkpoint::new(p.arch);
    c.insert_params("global.", p);
    c.to_bytes().unwrap()
}

fn reduction_equivalences(desk: &Desk) -> Outcome {
    let start = Instant::now();
    let (rounds, steps) = (2u64, 50u64);
    let mut w = desk.workload(Variant::Glob);
    w.sources.truncate(1);
    let c = VariantConfig { rounds, local_steps: steps, ..desk_cfg(Variant::Glob, 1) };
    let run = train::<f64>(&c, &hp(), &w, &RunOptions::with_workers(1), None).unwrap();

    let ds = &w.sources[0].train;
    let sched = hp().schedule(rounds * steps).unwrap();
    let mut p = init_params::<f64>(w.arch, c.seed).unwrap();
    for round in 0..rounds {
        let mut opt = AdamWState::for_params(&p);
        let mut r = rng::stream(c.seed, "batch", round, 0);
        for i in 0..steps {
            let batch: Vec<Vec<u32>> =
                (0..c.batch_size).map(|_| ds.sequences[r.random_range(0..ds.len())].clone()).collect();
            let mut g = backward(&p, forward(&p, &batch).unwrap().trace, 1.0).unwrap();
            clip_grad_norm(&mut g, 1.0);
            opt.step(p.tensors_mut(), g.tensors(), sched.lr(round * steps + i + 1), &hp().adamw).unwrap();
        }
    }
    let glob_plain = params_bytes(&run.params) == params_bytes(&p);

    let glob = desk.workload(Variant::Glob);
    let mut trim = glob.clone();
    trim.variant = Variant::Trim;
    for s in &mut trim.sources {
        s.trim = Some(TrimMap::identity(glob.arch.vocab_size));
    }
    let cg = VariantConfig { rounds, local_steps: steps, ..desk_cfg(Variant::Glob, 1) };
    let ct = VariantConfig { variant: Variant::Trim, ..cg.clone() };
    let a = train::<f64>(&cg, &hp(), &glob, &RunOptions::with_workers(1), None).unwrap();
    let b = train::<f64>(&ct, &hp(), &trim, &RunOptions::with_workers(1), None).unwrap();
    let trim_glob = params_bytes(&a.params) == params_bytes(&b.params) && a.metrics == b.metrics;
    let elapsed = start.elapsed();
    outcome(
        glob_plain && trim_glob && elapsed < Duration::from_secs(120),
        format!(
            "(a) GLOB K=1 vs plain training, {rounds}x{steps} steps: {}; (b) TRIM with identity maps vs GLOB: {}; {:.1} s",
            if glob_plain { "bitwise equal" } else { "DIFFER" },
            if trim_glob { "bitwise equal" } else { "DIFFER" },
            elapsed.as_secs_f64()
        ),
    )
}

fn small_arch(vocab: usize) -> Architecture {
    Architecture { num_blocks: 1, d_model: 4, num_heads: 1, expansion_ratio: 1, seq_len: 3, vocab_size: vocab }
}

fn random_trim(rng: &mut impl Rng, global: usize) -> TrimMap {
    let mut ids: Vec<u32> = (0..global as u32).collect();
    ids.shuffle(rng);
    ids.truncate(rng.random_range(1..=global));
    TrimMap::from_indices(global, ids).unwrap()
}

fn perturbed(p: &ModelParams<f64>, rng: &mut impl Rng) -> ModelParams<f64> {
    let mut q = p.clone();
    for t in q.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-1.0..1.0));
    }
    q
}

fn ownership_suite() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config { cases: 200, ..Config::default() });
    let result = runner.run(&(2usize..12, 1usize..5, any::<u64>()), |(global, k, seed)| {
        let mut r = rng::stream(seed, "acceptance", 0, 0);
        let arch = small_arch(global);
        let g = init_params::<f64>(arch, seed).unwrap();

        // scatter then gather is the identity; unselected rows of the scatter are zero
        let trim = random_trim(&mut r, global);
        let local = gather_rows(&perturbed(&g, &mut r).tok_emb, &trim);
        let padded = pad_embeddings(&local, &trim).unwrap();
        prop_assert_eq!(&gather_rows(&padded, &trim), &local);
        for row in 0..global {
            if !trim.owns(row as u32) {
                prop_assert!(padded.row(row).iter().all(|&x| x == 0.0));
            }
        }

        let trims: Vec<TrimMap> = (0..k).map(|_| random_trim(&mut r, global)).collect();
        let deltas: Vec<DeltaSet<f64>> = trims
            .iter()
            .enumerate()
            .map(|(id, t)| {
                let before = slice_token_embeddings(&g, t).unwrap();
                compute_delta(id, &before, &perturbed(&before, &mut r), Some(t)).unwrap()
            })
            .collect();
        let next = outer_apply(&g, &deltas).unwrap();
        for row in 0..global {
            let owners: Vec<usize> = (0..k).filter(|&i| trims[i].owns(row as u32)).collect();
            match owners.as_slice() {
                [] => prop_assert_eq!(next.tok_emb.row(row), g.tok_emb.row(row)),
                [one] => {
                    let d = deltas[*one].tok_emb.as_ref().unwrap();
                    prop_assert_eq!(next.tok_emb.row(row), d.after.row(row));
                    for (j, (&n, &o)) in next.tok_emb.row(row).iter().zip(g.tok_emb.row(row)).enumerate() {
                        prop_assert!((n - o - d.delta.row(row)[j]).abs() < 1e-12);
                    }
                }
                many => {
                    for j in 0..arch.d_model {
                        let mean: f64 = many.iter().map(|&i| deltas[i].tok_emb.as_ref().unwrap().delta.row(row)[j]).sum::<f64>()
                            / many.len() as f64;
                        prop_assert!((next.tok_emb.row(row)[j] - g.tok_emb.row(row)[j] - mean).abs() < 1e-12);
                    }
                }
            }
        }
        let mut shuffled = deltas.clone();
        shuffled.shuffle(&mut r);
        prop_assert_eq!(outer_apply(&g, &shuffled).unwrap(), next);
        Ok(())
    });
    let elapsed = start.elapsed();
    match result {
        Ok(()) => outcome(
            elapsed < Duration::from_secs(10),
            format!(
                "200 random cases: scatter/gather identity, sole-owner rows take the full delta, unowned rows unchanged, \
                 shared rows get the owner mean, permutation invariant; {:.2} s",
                elapsed.as_secs_f64()
            ),
        ),
        Err(e) => outcome(false, format!("property violated: {e}")),
    }
}

fn per_source_ppl(run: &RunResult64, round: u64) -> Vec<(String, f64)> {
    run.metrics
        .iter()
        .filter(|m| m.phase == "eval" && m.round == round)
        .map(|m| (m.source_id.clone().unwrap(), m.ppl.unwrap()))
        .collect()
}

fn desk_training(runs: &[(Variant, RunResult64)], elapsed: Duration) -> Outcome {
    let mut pass = elapsed < Duration::from_secs(600);
    let mut parts = Vec::new();
    for (v, run) in runs {
        let first = per_source_ppl(run, 0);
        let last = per_source_ppl(run, 10);
        let finite = run.metrics.iter().all(|m| m.loss.is_finite()) && run.params.all_finite();
        let worst = first
            .iter()
            .zip(&last)
            .map(|((_, a), (_, b))| b / a)
            .fold(0.0f64, f64::max);
        pass &= finite && worst < 0.6 && first.len() == 4 && last.len() == 4;
        parts.push(format!("{v} worst ratio {worst:.3}{}", if finite { "" } else { " NON-FINITE" }));
    }
    outcome(pass, format!("final/round-0 validation ppl < 0.6 per source: {}; {:.0} s total", parts.join(", "), elapsed.as_secs_f64()))
}

fn max_act(run: &RunResult64) -> f64 {
    run.metrics.iter().filter(|m| m.phase == "train").map(|m| m.act_norm).fold(0.0, f64::max)
}

fn robustness(desk: &Desk, glob_seed1: &RunResult64) -> Outcome {
    let glob_w = desk.workload(Variant::Glob);
    let std_w = desk.workload(Variant::Std);
    let mut holds = 0;
    let mut parts = Vec::new();
    for seed in [1u64, 2, 3] {
        let glob = if seed == 1 {
            max_act(glob_seed1)
        } else {
            max_act(&train::<f64>(&desk_cfg(Variant::Glob, seed), &hp(), &glob_w, &RunOptions::with_workers(1), None).unwrap())
        };
        let std = max_act(&train::<f64>(&desk_cfg(Variant::Std, seed), &hp(), &std_w, &RunOptions::with_workers(1), None).unwrap());
        holds += usize::from(glob <= std);
        parts.push(format!("seed {seed}: GLOB {glob:.2} vs STD {std:.2}"));
    }
    outcome(holds >= 2, format!("max activation norm GLOB <= STD(tau=0) on {holds}/3 seeds ({})", parts.join(", ")))
}

fn spec_isolation(desk: &Desk, runs: &[(Variant, RunResult64)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (v, run) in runs.iter().filter(|(v, _)| v.is_specialized()) {
        let exchanged = run.counter.embedding_params_exchanged();
        pass &= exchanged == 0;
        parts.push(format!("{v} full run: {exchanged} embedding params exchanged"));
    }
    for variant in [Variant::Spec, Variant::SpecOpt] {
        let w = desk.workload(variant);
        let cfg = VariantConfig { rounds: 6, local_steps: 10, sources_per_round: Some(2), ..desk_cfg(variant, 4) };
        let mut run = DeptRun::<f64>::new(cfg.clone(), hp(), &w, 1).unwrap();
        let mut unchanged = 0;
        for round in 0..cfg.rounds {
            let selected = dept_core::corpus::sample_sources(4, 2, &mut rng::stream(cfg.seed, "select", round, 0)).unwrap();
            let before = run.states.clone();
            run.step_round().unwrap();
            for k in 0..4 {
                let same = before[k] == run.states[k];
                if selected.contains(&k) {
                    pass &= !same;
                } else {
                    pass &= same;
                    unchanged += 1;
                }
            }
        }
        let exchanged = run.counter.embedding_params_exchanged();
        pass &= exchanged == 0;
        parts.push(format!("{variant} 2-of-4 sampling: {unchanged} unselected source-rounds bitwise unchanged, {exchanged} exchanged"));
    }
    outcome(pass, parts.join("; "))
}

fn sampling_statistics(desk: &Desk) -> Outcome {
    let sizes: Vec<usize> = desk.workload(Variant::Std).sources.iter().map(|s| s.global_train.len()).collect();
    let mut max_err = 0.0f64;
    for tau in [0.0, 0.3, 1.0] {
        let w = temperature_weights(&sizes, tau).unwrap();
        let norm: f64 = sizes.iter().map(|&n| (n as f64).powf(tau)).sum();
        for (wi, &n) in w.iter().zip(&sizes) {
            max_err = max_err.max((wi - (n as f64).powf(tau) / norm).abs());
        }
    }
    let target = temperature_weights(&sizes, 0.3).unwrap();
    let dist = mixture(&target).unwrap();
    let mut counts = [0usize; 4];
    let batch = 8;
    for step in 0..(10_000 / batch) as u64 {
        for k in draw_batch_sources(&dist, batch, &mut rng::stream(1, "std-batch", step, 0)) {
            counts[k] += 1;
        }
    }
    let worst = counts.iter().zip(&target).map(|(&c, &p)| (c as f64 / 10_000.0 - p).abs()).fold(0.0f64, f64::max);
    outcome(
        max_err < 1e-12 && worst <= 0.01,
        format!("closed-form error {max_err:.1e} at tau in {{0, 0.3, 1}}; 10k-draw histogram at tau=0.3 within {:.2}% of target", worst * 100.0),
    )
}

fn unigram_oracle() -> Outcome {
    let corpora = ["aab", "the cat sat on the mat", "zzzzyzzzzxzzzzy"];
    let mut worst = 0.0f64;
    let mut aab = 0.0;
    for text in corpora {
        let chars: Vec<char> = text.chars().collect();
        let mut alphabet = chars.clone();
        alphabet.sort_unstable();
        alphabet.dedup();
        let ids: Vec<u32> = chars.iter().map(|c| alphabet.binary_search(c).unwrap() as u32).collect();
        let ds = TokenizedDataset::new(ids.len(), alphabet.len(), vec![ids]).unwrap();
        let got = unigram_cross_entropy(&ds).unwrap();
        // ln N - (1/N) Σ c ln c, from character counts
        let n = chars.len() as f64;
        let brute = n.ln() - alphabet.iter().map(|a| chars.iter().filter(|c| *c == a).count() as f64).map(|c| c * c.ln()).sum::<f64>() / n;
        worst = worst.max((got - brute).abs());
        if text == "aab" {
            aab = got;
        }
    }
    outcome(
        worst < 1e-9 && (aab - 0.6365).abs() < 5e-5,
        format!("max deviation from brute-force counts {worst:.1e} over 3 corpora; \"aab\" = {aab:.4} nats"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let desk = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    let cfg_text = desk
        .replace("../data/desk", "data")
        .replace("../runs/desk", "run")
        .replace("variant = \"SPEC\"", "variant = \"TRIM\"")
        .replace("rounds = 10", "rounds = 4");
    let cfg = dir.path().join("desk.toml");
    std::fs::write(&cfg, cfg_text).unwrap();
    let dept = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_dept")).args(args).arg("--config").arg(&cfg).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    dept(&["synth"]);
    let mut files = Vec::new();
    for workers in ["1", "4"] {
        let out = dir.path().join(format!("run-w{workers}"));
        let out_arg = out.to_str().unwrap();
        dept(&["prepare", "--out", out_arg]);
        dept(&["train", "--workers", workers, "--seed", "7", "--out", out_arg]);
        files.push(std::fs::read(out.join("metrics.jsonl")).unwrap());
    }
    let same = files[0] == files[1] && !files[0].is_empty();
    outcome(same, format!("TRIM, 4 rounds: metrics.jsonl for --workers 1 and 4 {}", if same { "byte-identical" } else { "DIFFER" }))
}

fn continued_protocol(desk: &Desk, glob: &RunResult64) -> Outcome {
    let w = desk.workload(Variant::Glob);
    let total = desk_cfg(Variant::Glob, 1).rounds * desk_cfg(Variant::Glob, 1).local_steps;
    let steps = ct_steps(0.15, total).unwrap();
    let cfg = CtConfig { steps, batch_size: 8, policy: SamplingPolicy::Uniform, seed: 1 };
    let mut observed = Vec::new();
    let pre = continued_pretrain(
        &glob.params.body,
        w.arch,
        EmbeddingInit::Pretrained { tok_emb: glob.params.tok_emb.clone(), pos_emb: glob.params.pos_emb.clone() },
        &w.global_train_sets(),
        &cfg,
        &hp(),
        |s, _| {
            observed.push(s);
            Ok(())
        },
    )
    .unwrap();
    let random =
        continued_pretrain(&glob.params.body, w.arch, EmbeddingInit::Random, &w.global_train_sets(), &cfg, &hp(), |_, _| Ok(())).unwrap();
    let exact = steps == 150 && pre.losses.len() == 150 && random.losses.len() == 150 && observed == (0..=150).collect::<Vec<_>>();
    let lower = pre.initial_loss() < random.initial_loss();
    outcome(
        exact && lower,
        format!(
            "N_CT = 15% of {total} = {steps} steps run exactly: {exact}; step-0 loss pretrained {:.3} < random {:.3}: {lower}",
            pre.initial_loss(),
            random.initial_loss()
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("[{}] criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "cost-ledger reproduction", cost_ledger());
    report(2, "gradient exactness", gradient_exactness());
    let desk = Desk::new();
    report(3, "reduction equivalences", reduction_equivalences(&desk));
    report(4, "trim/aggregation ownership", ownership_suite());

    let start = Instant::now();
    let runs: Vec<(Variant, RunResult64)> = Variant::DECOUPLED
        .iter()
        .map(|&v| (v, train::<f64>(&desk_cfg(v, 1), &hp(), &desk.workload(v), &RunOptions::with_workers(1), None).unwrap()))
        .collect();
    report(5, "desk-scale training sanity", desk_training(&runs, start.elapsed()));
    let glob = &runs.iter().find(|(v, _)| *v == Variant::Glob).unwrap().1;
    report(6, "robustness trend", robustness(&desk, glob));
    report(7, "SPEC isolation", spec_isolation(&desk, &runs));
    report(8, "sampling statistics", sampling_statistics(&desk));
    report(9, "unigram-CE oracle", unigram_oracle());
    report(10, "determinism and pool-size independence", determinism());
    report(11, "continued pre-training protocol", continued_protocol(&desk, glob));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
