//! Perplexity evaluation, cross-source reports and plasticity curves.

use std::path::Path;

use serde::Serialize;

use crate::corpus::{unigram_cross_entropy, TokenizedDataset};
use crate::dept::{continued_pretrain, CtConfig, EmbeddingInit, OodData, SamplingPolicy, TrainHyper, TrainRunResult, Workload};
use crate::error::{DeptError, Result};
use crate::model::{forward, Architecture, Body, ModelParams};
use crate::scalar::Scalar;
use crate::variant::Variant;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    /// Mean next-token cross-entropy over every predicted position.
    pub loss: f64,
    pub ppl: f64,
    /// Largest activation norm over the evaluation batches.
    pub act_norm: f64,
}

/// One deterministic pass over every sequence, in batches of `batch_size`.
pub fn evaluate_dataset<T: Scalar>(params: &ModelParams<T>, dataset: &TokenizedDataset, batch_size: usize) -> Result<EvalStats> {
    if dataset.vocab_size != params.vocab_size() {
        return Err(DeptError::ShapeMismatch(format!(
            "dataset over {} tokens, model over {}",
            dataset.vocab_size,
            params.vocab_size()
        )));
    }
    if dataset.is_empty() {
        return Err(DeptError::EmptyDataset("nothing to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut act_norm = 0.0f64;
    for chunk in dataset.sequences.chunks(batch_size.max(1)) {
        let out = forward(params, chunk)?;
        let n = out.trace.predicted_positions();
        total += out.loss.as_f64() * n as f64;
        count += n;
        act_norm = act_norm.max(out.trace.activation_l2_norm());
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(DeptError::NonFinite(format!("evaluation loss {loss}")));
    }
    Ok(EvalStats { loss, ppl: loss.exp(), act_norm })
}

/// `exp` of the mean next-token cross-entropy over the whole dataset.
pub fn perplexity<T: Scalar>(params: &ModelParams<T>, dataset: &TokenizedDataset) -> Result<f64> {
    evaluate_dataset(params, dataset, 64).map(|e| e.ppl)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub source: String,
    pub ood: bool,
    /// `None` when the model cannot be evaluated on this source (SPEC on
    /// held-out data before continued pre-training).
    pub ppl: Option<f64>,
    pub unigram_ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub label: String,
    /// `pre-ct` or `post-ct`.
    pub phase: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    fn mean(rows: impl Iterator<Item = Option<f64>>) -> Option<f64> {
        let vals: Option<Vec<f64>> = rows.collect();
        vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Arithmetic mean over in-distribution sources.
    pub fn in_distribution_avg(&self) -> Option<f64> {
        Self::mean(self.rows.iter().filter(|r| !r.ood).map(|r| r.ppl))
    }

    /// Arithmetic mean over every listed source, held-out ones included.
    pub fn avg_with_ood(&self) -> Option<f64> {
        Self::mean(self.rows.iter().map(|r| r.ppl))
    }

    pub fn ppl(&self, source: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.source == source).and_then(|r| r.ppl)
    }
}

/// Report for a finished run before continued pre-training: every source on
/// its worker vocabulary, held-out sources through the global embeddings
/// when the run has them.
pub fn evaluate_all<T: Scalar>(
    result: &TrainRunResult<T>,
    workload: &Workload,
    ood: &[OodData],
    batch_size: usize,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for (k, s) in workload.sources.iter().enumerate() {
        let params = result.source_params(workload, k)?;
        rows.push(EvalRow {
            source: s.name.clone(),
            ood: false,
            ppl: Some(evaluate_dataset(&params, &s.validation, batch_size)?.ppl),
            unigram_ce: unigram_cross_entropy(&s.validation)?,
        });
    }
    for o in ood {
        let ppl = if result.has_global_embeddings() {
            Some(evaluate_dataset(&result.params, &o.validation, batch_size)?.ppl)
        } else {
            None
        };
        rows.push(EvalRow { source: o.name.clone(), ood: true, ppl, unigram_ce: unigram_cross_entropy(&o.validation)? });
    }
    Ok(EvalReport { label: result.variant.to_string(), phase: "pre-ct".into(), rows })
}

/// Report for a model over the global vocabulary (after continued pre-training).
pub fn evaluate_global<T: Scalar>(
    label: &str,
    phase: &str,
    params: &ModelParams<T>,
    workload: &Workload,
    ood: &[OodData],
    batch_size: usize,
) -> Result<EvalReport> {
    let sets = workload
        .sources
        .iter()
        .map(|s| (&s.name, &s.global_validation, false))
        .chain(ood.iter().map(|o| (&o.name, &o.validation, true)));
    let rows = sets
        .map(|(name, ds, is_ood)| {
            Ok(EvalRow {
                source: name.clone(),
                ood: is_ood,
                ppl: Some(evaluate_dataset(params, ds, batch_size)?.ppl),
                unigram_ce: unigram_cross_entropy(ds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { label: label.to_string(), phase: phase.to_string(), rows })
}

/// Relative improvement of `value` over `best_baseline`, in percent.
pub fn improvement_pct(best_baseline: f64, value: f64) -> f64 {
    (best_baseline - value) / best_baseline * 100.0
}

/// Smallest and largest improvement of any variant over the best (lowest)
/// baseline; `None` if either side has no value.
pub fn improvement_range(baselines: &[Option<f64>], variants: &[Option<f64>]) -> Option<(f64, f64)> {
    let best = baselines.iter().flatten().copied().reduce(f64::min)?;
    let imps: Vec<f64> = variants.iter().flatten().map(|&v| improvement_pct(best, v)).collect();
    let min = imps.iter().copied().reduce(f64::min)?;
    let max = imps.iter().copied().reduce(f64::max)?;
    Some((min, max))
}

fn fmt_opt(x: Option<f64>, decimals: usize) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.decimals$}"))
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("variant,phase,source,kind,ppl,unigram_ce\n");
    for r in reports {
        for row in &r.rows {
            let kind = if row.ood { "ood" } else { "in" };
            let ppl = row.ppl.map_or_else(|| "unavailable".to_string(), |p| format!("{p:.6}"));
            out.push_str(&format!("{},{},{},{kind},{ppl},{:.6}\n", r.label, r.phase, row.source, row.unigram_ce));
        }
    }
    out
}

/// Markdown table: one row per report, one column per source, both
/// averages, and improvement rows when both baselines and variants appear.
pub fn reports_markdown(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let mut out = String::from("| Name |");
    for row in &first.rows {
        let tag = if row.ood { "-OOD" } else { "" };
        out.push_str(&format!(" {}{tag} ({:.2}) |", row.source, row.unigram_ce));
    }
    out.push_str(" AVG | AVG+OOD |\n|---|");
    out.push_str(&"---|".repeat(first.rows.len() + 2));
    out.push('\n');
    for r in reports {
        out.push_str(&format!("| {} ({}) |", r.label, r.phase));
        for src in &first.rows {
            out.push_str(&format!(" {} |", fmt_opt(r.ppl(&src.source), 2)));
        }
        out.push_str(&format!(" {} | {} |\n", fmt_opt(r.in_distribution_avg(), 2), fmt_opt(r.avg_with_ood(), 2)));
    }
    let is_baseline = |r: &EvalReport| r.label.parse::<Variant>().is_ok_and(|v| v.is_baseline());
    if reports.iter().any(is_baseline) && reports.iter().any(|r| !is_baseline(r)) {
        let column = |pick: &dyn Fn(&EvalReport) -> Option<f64>| {
            let base: Vec<_> = reports.iter().filter(|r| is_baseline(r)).map(pick).collect();
            let var: Vec<_> = reports.iter().filter(|r| !is_baseline(r)).map(pick).collect();
            improvement_range(&base, &var)
        };
        let mut cols: Vec<Option<(f64, f64)>> =
            first.rows.iter().map(|src| column(&|r: &EvalReport| r.ppl(&src.source))).collect();
        cols.push(column(&|r: &EvalReport| r.in_distribution_avg()));
        cols.push(column(&|r: &EvalReport| r.avg_with_ood()));
        for (name, pick) in [("Min Imp (%)", 0), ("Max Imp (%)", 1)] {
            out.push_str(&format!("| {name} |"));
            for c in &cols {
                out.push_str(&format!(" {} |", fmt_opt(c.map(|(lo, hi)| if pick == 0 { lo } else { hi }), 1)));
            }
            out.push('\n');
        }
    }
    out
}

/// Writes `report.csv` and `report.md` under `<out_dir>/eval/`.
pub fn write_reports(out_dir: &Path, name: &str, reports: &[EvalReport]) -> Result<()> {
    let dir = out_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{name}.csv")), reports_csv(reports))?;
    std::fs::write(dir.join(format!("{name}.md")), reports_markdown(reports))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptationCurve {
    /// `(step, validation perplexity)`, steps strictly increasing.
    pub points: Vec<(u64, f64)>,
}

/// Attaches fresh embeddings to `body` and adapts on `target`, recording
/// validation perplexity every `record_every` steps (and at step 0).
#[allow(clippy::too_many_arguments)]
pub fn plasticity_run<T: Scalar>(
    body: &Body<T>,
    arch: Architecture,
    target_train: &TokenizedDataset,
    target_validation: &TokenizedDataset,
    steps: u64,
    record_every: u64,
    batch_size: usize,
    seed: u64,
    hp: &TrainHyper,
) -> Result<AdaptationCurve> {
    if record_every == 0 || steps < record_every {
        return Err(DeptError::InvalidArgument(format!("need steps ({steps}) >= record_every ({record_every}) >= 1")));
    }
    let cfg = CtConfig { steps, batch_size, policy: SamplingPolicy::Uniform, seed };
    let mut points = Vec::new();
    continued_pretrain(body, arch, EmbeddingInit::Random, &[target_train], &cfg, hp, |step, params| {
        if step % record_every == 0 {
            points.push((step, evaluate_dataset(params, target_validation, batch_size)?.ppl));
        }
        Ok(())
    })?;
    Ok(AdaptationCurve { points })
}

pub fn curve_csv(curve: &AdaptationCurve) -> String {
    let mut out = String::from("step,ppl\n");
    for (s, p) in &curve.points {
        out.push_str(&format!("{s},{p:.6}\n"));
    }
    out
}
