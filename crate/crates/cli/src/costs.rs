//! `costs`: analytical memory/communication tables, checked against
//! published rows or compared with a run's measured counter.

use std::path::Path;

use anyhow::anyhow;
use dept_core::costs::{
    check_row, format_count, format_sig, to_f64, CommCounter, CostInputs, CostReport, CostRow, Rational, RowCheck,
};
use serde::Deserialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::prepare::load_prepared;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceFile {
    version: u32,
    row: Vec<CostRow>,
}

/// Whether the file is a table of reference rows rather than an experiment config.
pub fn is_reference_table(text: &str) -> bool {
    text.parse::<toml::Table>().is_ok_and(|t| t.contains_key("row"))
}

pub fn parse_reference(text: &str) -> CliResult<Vec<CostRow>> {
    let file: ReferenceFile = toml::from_str(text).map_err(|e| CliError::Config(e.into()))?;
    if file.version != crate::config::CONFIG_VERSION {
        return Err(CliError::Config(anyhow!("unsupported cost table version {}", file.version)));
    }
    Ok(file.row)
}

pub fn check_reference(rows: &[CostRow]) -> CliResult<Vec<RowCheck>> {
    rows.iter().map(|r| check_row(r).map_err(CliError::from)).collect()
}

fn ratio(x: Rational) -> String {
    format_sig(to_f64(x), 3)
}

const HEADER: [&str; 9] = ["Type", "Blocks", "Method", "N_local", "V_k", "M_k", "M_k ratio", "Comms/step", "Comms ratio"];

fn reference_cells(c: &RowCheck, row: &CostRow) -> [String; 9] {
    let r = &c.report;
    [
        row.label.clone(),
        row.blocks.to_string(),
        row.variant.to_string(),
        row.local_steps.to_string(),
        row.mean_local_vocab.to_string(),
        format_count(to_f64(r.memory_params)),
        ratio(r.memory_ratio),
        format_count(to_f64(r.per_step_comms_params)),
        ratio(r.comms_ratio),
    ]
}

fn status(c: &RowCheck) -> String {
    let off: Vec<String> = c
        .cells
        .iter()
        .filter(|x| !x.matches)
        .map(|x| {
            let tag = if x.known_mismatch { "known" } else { "MISMATCH" };
            format!("{}={} vs {} ({tag})", x.column, format_sig(x.computed, 3), x.expected)
        })
        .collect();
    if off.is_empty() { "ok".into() } else { off.join("; ") }
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn reference_text(rows: &[CostRow], checks: &[RowCheck]) -> String {
    let mut header = HEADER.to_vec();
    header.push("Check");
    let body: Vec<Vec<String>> = rows
        .iter()
        .zip(checks)
        .map(|(row, c)| {
            let mut cells = reference_cells(c, row).to_vec();
            cells.push(status(c));
            cells
        })
        .collect();
    table(&header, &body)
}

pub fn reference_csv(rows: &[CostRow], checks: &[RowCheck]) -> String {
    let mut out = String::from(
        "type,blocks,method,n_local,mean_local_vocab,memory,memory_ratio,comms_per_step,comms_ratio,memory_exact,comms_exact,accepted\n",
    );
    for (row, c) in rows.iter().zip(checks) {
        let cells = reference_cells(c, row);
        let accepted = c.cells.iter().all(|x| x.accepted());
        out.push_str(&format!(
            "{},{},{accepted}\n",
            cells.join(","),
            [c.report.memory_params, c.report.per_step_comms_params].map(|x| x.to_string()).join(",")
        ));
    }
    out
}

/// Analytical figures for an experiment, with the measured counter when a
/// finished run left one behind.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentCosts {
    pub report: CostReport,
    pub measured: Option<CommCounter>,
}

impl ExperimentCosts {
    /// Measured per-step upload equals the analytical per-step figure.
    pub fn agrees(&self) -> Option<bool> {
        let m = self.measured.as_ref()?;
        Some(m.per_step_upload()? == self.report.per_step_comms_params)
    }

    pub fn text(&self) -> String {
        let r = &self.report;
        let i = &r.inputs;
        let mut rows = vec![vec![
            "analytical".to_string(),
            i.variant.to_string(),
            i.local_steps.to_string(),
            format_sig(to_f64(i.mean_local_vocab), 6),
            format_count(to_f64(r.memory_params)),
            ratio(r.memory_ratio),
            format_count(to_f64(r.per_step_comms_params)),
            ratio(r.comms_ratio),
        ]];
        if let Some(m) = &self.measured {
            let up = m.per_step_upload().map_or("-".into(), |x| format_count(to_f64(x)));
            let down = m.per_step_download().map_or("-".into(), |x| format_count(to_f64(x)));
            rows.push(vec!["measured upload".into(), "".into(), "".into(), "".into(), "".into(), "".into(), up, "".into()]);
            rows.push(vec!["measured download".into(), "".into(), "".into(), "".into(), "".into(), "".into(), down, "".into()]);
        }
        let mut out = table(&["Source", "Method", "N_local", "V_k", "M_k", "M_k ratio", "Comms/step", "Comms ratio"], &rows);
        if let Some(m) = &self.measured {
            out.push_str(&format!("counter: {m}\n"));
            let verdict = if self.agrees() == Some(true) { "agree" } else { "DISAGREE" };
            out.push_str(&format!("analytical and measured per-step upload {verdict}\n"));
        }
        out
    }

    pub fn csv(&self) -> String {
        let r = &self.report;
        let mut out = String::from("source,method,n_local,mean_local_vocab,memory,memory_ratio,comms_per_step,comms_ratio\n");
        out.push_str(&format!(
            "analytical,{},{},{},{},{},{},{}\n",
            r.inputs.variant,
            r.inputs.local_steps,
            r.inputs.mean_local_vocab,
            r.memory_params,
            r.memory_ratio,
            r.per_step_comms_params,
            r.comms_ratio
        ));
        if let Some(m) = &self.measured {
            let show = |x: Option<Rational>| x.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!("measured-upload,{},,,,,{},\n", r.inputs.variant, show(m.per_step_upload())));
            out.push_str(&format!("measured-download,{},,,,,{},\n", r.inputs.variant, show(m.per_step_download())));
        }
        out
    }
}

pub fn experiment_costs(cfg: &ExperimentConfig) -> CliResult<ExperimentCosts> {
    let prepared = load_prepared(cfg)?;
    let w = &prepared.workload;
    let (sum, count) = w.mean_local_vocab();
    let mean = Rational::new(sum as i128, count as i128);
    let report = CostReport::new(CostInputs::from_arch(cfg.run.variant, &w.arch, mean, cfg.run.local_steps))?;
    let counter_path = crate::train::artifacts(cfg).counter;
    let measured = if counter_path.is_file() {
        Some(serde_json::from_str(&std::fs::read_to_string(&counter_path)?)?)
    } else {
        None
    };
    Ok(ExperimentCosts { report, measured })
}

/// Output of `costs` for either kind of input file: (text, csv).
pub fn cmd_costs(path: &Path, cfg: Option<&ExperimentConfig>) -> CliResult<(String, String)> {
    match cfg {
        Some(cfg) => {
            let costs = experiment_costs(cfg)?;
            Ok((costs.text(), costs.csv()))
        }
        None => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(anyhow!("{}: {e}", path.display())))?;
            let rows = parse_reference(&text)?;
            let checks = check_reference(&rows)?;
            Ok((reference_text(&rows, &checks), reference_csv(&rows, &checks)))
        }
    }
}
