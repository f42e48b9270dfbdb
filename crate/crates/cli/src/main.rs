use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dept_cli::costs::{cmd_costs, is_reference_table};
use dept_cli::evaluate::{cmd_eval, cmd_plasticity};
use dept_cli::prepare::cmd_prepare;
use dept_cli::synth::cmd_synth;
use dept_cli::train::{cmd_train, TrainOptions};
use dept_cli::{CliError, CliResult, ExperimentConfig};
use dept_core::eval::reports_markdown;

#[derive(Parser)]
#[command(name = "dept", version, about = "Decoupled-embedding pre-training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic desk corpora into the config's data directory.
    Synth(Common),
    /// Build vocabularies, trim maps and tokenized splits.
    Prepare(Common),
    /// Run the configured variant, writing metrics, checkpoints and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many rounds, leaving a resumable run.
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Cost table for a reference-row file or an experiment config.
    Costs(Common),
    /// Continued pre-training plus pre/post evaluation reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's final checkpoint.
        #[arg(long, alias = "resume")]
        checkpoint: Option<PathBuf>,
    },
    /// Adaptation curves of the trained body versus a fresh one.
    Plasticity {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "resume")]
        checkpoint: Option<PathBuf>,
    },
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn costs(common: &Common) -> CliResult<()> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| CliError::Config(anyhow::anyhow!("{}: {e}", common.config.display())))?;
    let (cfg, out) = if is_reference_table(&text) {
        (None, common.out.clone())
    } else {
        let cfg = load(common)?;
        let out = cfg.paths.out_dir.clone();
        (Some(cfg), Some(out))
    };
    let (table, csv) = cmd_costs(&common.config, cfg.as_ref())?;
    print!("{table}");
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("costs.csv");
        std::fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    } else {
        print!("\n{csv}");
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = load(&c)?;
            let names = cmd_synth(&cfg)?;
            println!("wrote {} sources to {}", names.len(), cfg.paths.data_dir.display());
        }
        Command::Prepare(c) => {
            let cfg = load(&c)?;
            let outcome = cmd_prepare(&cfg)?;
            let verb = if outcome.skipped { "up to date" } else { "prepared" };
            println!("{verb}: {} files in {}", outcome.files.len(), cfg.prepared_dir().display());
        }
        Command::Train { common, resume, stop_after } => {
            let cfg = load(&common)?;
            let opts = TrainOptions { workers: common.workers, resume, stop_after };
            let result = cmd_train(&cfg, &opts)?;
            println!(
                "{}: {} rounds, {} steps; {}",
                result.variant, result.rounds_completed, result.steps_completed, result.counter
            );
        }
        Command::Costs(c) => costs(&c)?,
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let outcome = cmd_eval(&cfg, checkpoint.as_deref())?;
            let mut reports = vec![outcome.pre];
            reports.extend(outcome.post);
            print!("{}", reports_markdown(&reports));
        }
        Command::Plasticity { common, checkpoint } => {
            let cfg = load(&common)?;
            print!("{}", cmd_plasticity(&cfg, checkpoint.as_deref())?.csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dept: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

