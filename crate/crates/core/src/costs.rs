//! Memory and per-step communication costs, counted in parameters.
//!
//! Analytical costs are exact rationals. The runtime counter tallies what the
//! simulator actually moves: uploads are deltas, downloads are the fresh
//! globals a worker receives. The analytical per-step figure corresponds to
//! uploads only (one one-way model transfer every `N_local` steps).

use std::fmt;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{DeptError, Result};
use crate::model::Architecture;
use crate::optim::DeltaSet;
use crate::scalar::Scalar;
use crate::variant::Variant;

pub type Rational = Ratio<i128>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub variant: Variant,
    pub total_params: u64,
    pub global_vocab: u64,
    pub mean_local_vocab: Rational,
    pub d_model: u64,
    pub seq_len: u64,
    pub local_steps: u64,
}

impl CostInputs {
    /// Inputs for a concrete architecture whose `vocab_size` is the global vocabulary.
    pub fn from_arch(variant: Variant, arch: &Architecture, mean_local_vocab: Rational, local_steps: u64) -> Self {
        Self {
            variant,
            total_params: arch.total_param_count(),
            global_vocab: arch.vocab_size as u64,
            mean_local_vocab,
            d_model: arch.d_model as u64,
            seq_len: arch.seq_len as u64,
            local_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.total_params, self.global_vocab, self.d_model, self.seq_len, self.local_steps];
        if counts.contains(&0) || self.mean_local_vocab < Rational::from_integer(1) {
            return Err(DeptError::InconsistentInputs("all counts must be at least 1".into()));
        }
        if self.variant == Variant::Trim && self.mean_local_vocab > Rational::from_integer(self.global_vocab as i128) {
            return Err(DeptError::InconsistentInputs("trimmed vocabulary larger than the global one".into()));
        }
        Ok(())
    }

    fn m(&self) -> Rational {
        Rational::from_integer(self.total_params as i128)
    }
}

fn non_negative(x: Rational, what: &str) -> Result<Rational> {
    if x < Rational::zero() {
        return Err(DeptError::InconsistentInputs(format!("{what} is negative ({x})")));
    }
    Ok(x)
}

/// Parameters resident on one worker.
pub fn memory_cost(inputs: &CostInputs) -> Result<Rational> {
    inputs.validate()?;
    match inputs.variant {
        Variant::Std | Variant::Act | Variant::Glob => Ok(inputs.m()),
        Variant::Trim | Variant::Spec | Variant::SpecOpt => {
            let shrink = (Rational::from_integer(inputs.global_vocab as i128) - inputs.mean_local_vocab)
                * Rational::from_integer(inputs.d_model as i128);
            non_negative(inputs.m() - shrink, "memory cost")
        }
    }
}

/// Parameters one worker uploads per optimization step.
pub fn comms_cost_per_step(inputs: &CostInputs) -> Result<Rational> {
    inputs.validate()?;
    let n = Rational::from_integer(inputs.local_steps as i128);
    match inputs.variant {
        Variant::Std | Variant::Act => Ok(inputs.m()),
        Variant::Glob => Ok(inputs.m() / n),
        Variant::Trim => Ok(memory_cost(inputs)? / n),
        Variant::Spec | Variant::SpecOpt => {
            let private = (inputs.global_vocab + inputs.seq_len) as i128 * inputs.d_model as i128;
            Ok(non_negative(inputs.m() - Rational::from_integer(private), "communicated body")? / n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub inputs: CostInputs,
    pub memory_params: Rational,
    pub per_step_comms_params: Rational,
    /// Relative to a standard run of the same model (memory ℳ, per-step comms ℳ).
    pub memory_ratio: Rational,
    pub comms_ratio: Rational,
}

impl CostReport {
    pub fn new(inputs: CostInputs) -> Result<Self> {
        let memory_params = memory_cost(&inputs)?;
        let per_step_comms_params = comms_cost_per_step(&inputs)?;
        let m = inputs.m();
        Ok(Self {
            memory_ratio: memory_params / m,
            comms_ratio: per_step_comms_params / m,
            memory_params,
            per_step_comms_params,
            inputs,
        })
    }
}

pub fn to_f64(x: Rational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `x` rounded to `sig` significant figures, without exponent notation.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Parameter count with a K/M/B suffix, 3 significant figures.
pub fn format_count(x: f64) -> String {
    let (scale, suffix) = match x.abs() {
        v if v >= 1e9 => (1e9, "B"),
        v if v >= 1e5 => (1e6, "M"),
        v if v >= 1e3 => (1e3, "K"),
        _ => (1.0, ""),
    };
    format!("{}{suffix}", format_sig(x / scale, 3))
}

/// Whether `value` shows as `shown` when rounded to the same number of
/// decimals. `shown` is a plain number with an optional K/M/B suffix.
pub fn matches_display(value: f64, shown: &str) -> Result<bool> {
    let shown = shown.trim();
    let (digits, scale) = match shown.chars().last() {
        Some('K') => (&shown[..shown.len() - 1], 1e3),
        Some('M') => (&shown[..shown.len() - 1], 1e6),
        Some('B') => (&shown[..shown.len() - 1], 1e9),
        _ => (shown, 1.0),
    };
    let target: f64 = digits
        .parse()
        .map_err(|_| DeptError::Format(format!("not a displayed number: {shown:?}")))?;
    let decimals = digits.split_once('.').map_or(0, |(_, frac)| frac.len());
    let rounded = format!("{:.decimals$}", value / scale).parse::<f64>().unwrap_or(f64::NAN);
    Ok((rounded - target).abs() <= 1e-9 * target.abs().max(1.0))
}

/// One published cost row: inputs plus the values as displayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRow {
    pub label: String,
    pub blocks: u32,
    pub variant: Variant,
    pub total_params: u64,
    pub global_vocab: u64,
    pub mean_local_vocab: u64,
    pub d_model: u64,
    pub seq_len: u64,
    pub local_steps: u64,
    pub rounds: u64,
    pub expected_memory: Option<String>,
    pub expected_memory_ratio: Option<String>,
    pub expected_comms: Option<String>,
    pub expected_comms_ratio: Option<String>,
    /// Cells known not to follow from the row's own inputs.
    #[serde(default)]
    pub known_mismatch: Vec<String>,
}

impl CostRow {
    pub fn inputs(&self) -> CostInputs {
        CostInputs {
            variant: self.variant,
            total_params: self.total_params,
            global_vocab: self.global_vocab,
            mean_local_vocab: Rational::from_integer(self.mean_local_vocab as i128),
            d_model: self.d_model,
            seq_len: self.seq_len,
            local_steps: self.local_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCheck {
    pub column: &'static str,
    pub computed: f64,
    pub expected: String,
    pub matches: bool,
    pub known_mismatch: bool,
}

impl CellCheck {
    /// Matches, or is a documented mismatch.
    pub fn accepted(&self) -> bool {
        self.matches || self.known_mismatch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowCheck {
    pub label: String,
    pub variant: Variant,
    pub report: CostReport,
    pub cells: Vec<CellCheck>,
}

impl RowCheck {
    pub fn all_match(&self) -> bool {
        self.cells.iter().all(|c| c.matches)
    }
}

pub fn check_row(row: &CostRow) -> Result<RowCheck> {
    let report = CostReport::new(row.inputs())?;
    let columns: [(&'static str, Rational, &Option<String>); 4] = [
        ("memory", report.memory_params, &row.expected_memory),
        ("memory_ratio", report.memory_ratio, &row.expected_memory_ratio),
        ("comms", report.per_step_comms_params, &row.expected_comms),
        ("comms_ratio", report.comms_ratio, &row.expected_comms_ratio),
    ];
    let mut cells = Vec::new();
    for (column, value, expected) in columns {
        if let Some(expected) = expected {
            let computed = to_f64(value);
            cells.push(CellCheck {
                column,
                computed,
                expected: expected.clone(),
                matches: matches_display(computed, expected)?,
                known_mismatch: row.known_mismatch.iter().any(|c| c == column),
            });
        }
    }
    Ok(RowCheck { label: row.label.clone(), variant: row.variant, report, cells })
}

/// Cumulative parameters moved by the simulator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounter {
    pub uploaded_params: u64,
    pub downloaded_params: u64,
    pub uploaded_embedding_params: u64,
    pub downloaded_embedding_params: u64,
    /// Worker-rounds for decoupled runs, synchronized steps for baselines.
    pub transfers: u64,
    /// Optimization steps covered by the recorded transfers, per worker.
    pub steps: u64,
}

impl CommCounter {
    pub const BYTES_PER_PARAM: u64 = 8;

    /// One worker's round: it downloaded `download` (of which `download_embeddings`
    /// are embedding rows) and uploads `delta` after `local_steps` steps.
    pub fn record_worker_round<T: Scalar>(
        &mut self,
        download: u64,
        download_embeddings: u64,
        delta: &DeltaSet<T>,
        local_steps: u64,
    ) {
        self.downloaded_params += download;
        self.downloaded_embedding_params += download_embeddings;
        self.uploaded_params += delta.communicated_params();
        self.uploaded_embedding_params += delta.embedding_params();
        self.transfers += 1;
        self.steps += local_steps;
    }

    /// One synchronized step of a centralized baseline: the full gradient up
    /// and the full model down.
    pub fn record_sync_step(&mut self, total_params: u64, embedding_params: u64) {
        self.uploaded_params += total_params;
        self.downloaded_params += total_params;
        self.uploaded_embedding_params += embedding_params;
        self.downloaded_embedding_params += embedding_params;
        self.transfers += 1;
        self.steps += 1;
    }

    pub fn embedding_params_exchanged(&self) -> u64 {
        self.uploaded_embedding_params + self.downloaded_embedding_params
    }

    /// Cumulative bytes in both directions.
    pub fn total_bytes(&self) -> u64 {
        (self.uploaded_params + self.downloaded_params) * Self::BYTES_PER_PARAM
    }

    /// Mean uploaded parameters per worker per step; comparable to
    /// [`comms_cost_per_step`].
    pub fn per_step_upload(&self) -> Option<Rational> {
        (self.steps > 0).then(|| Rational::new(self.uploaded_params as i128, self.steps as i128))
    }

    pub fn per_step_download(&self) -> Option<Rational> {
        (self.steps > 0).then(|| Rational::new(self.downloaded_params as i128, self.steps as i128))
    }
}

impl fmt::Display for CommCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "up {} params ({} embedding), down {} params ({} embedding), {} steps",
            self.uploaded_params,
            self.uploaded_embedding_params,
            self.downloaded_params,
            self.downloaded_embedding_params,
            self.steps
        )
    }
}
