//! The `parsrec` experiment driver.
//!
//! Every subcommand reads one TOML config (all keys optional), writes into
//! the run directory `out`, and echoes the resolved config, the seed and the
//! build version next to its outputs. The seed is taken from `--seed`, then
//! `PARSREC_SEED`, then the file.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    ablation_csv, ablation_grid, artifact_version, checkpoint_path, cmd_ablate, cmd_analyze,
    cmd_eval, cmd_spillover, cmd_synth, cmd_train, dataset_path, metrics_csv, obtain_dataset,
    prepare_run_dir, train_model, AblationRow, AnalyzeOutput, SpilloverOutput,
};
pub use config::{
    load_config, parse_config, parse_ks, AnalysisOptions, EvalOptions, Overrides, RunConfig,
    SEED_ENV,
};

#[derive(Debug, Parser)]
#[command(
    name = "parsrec",
    version,
    about = "Sequential basket recommendation experiments"
)]
pub struct Cli {
    /// TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset file (defaults to `<out>/dataset.jsonl`, else synthesized).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint file (defaults to `<out>/model.ckpt`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Metric cutoffs, e.g. `1,5,10`.
    #[arg(long, global = true, value_parser = parse_ks)]
    pub k: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub removed_category: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its validation report.
    Synth,
    /// Train with early stopping and save a checkpoint.
    Train,
    /// Score the checkpoint, the popularity baseline and a random ranker.
    Eval,
    /// Category attention heatmaps per user group.
    Analyze,
    /// Remove one category at test time and report predicted sales.
    Spillover,
    /// Train and score every architecture variant.
    Ablate,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            ks: self.k.clone(),
            removed_category: self.removed_category,
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> crate::Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides())?;
    prepare_run_dir(&cfg)?;
    let ds = cli.dataset.as_deref();
    let ck = cli.checkpoint.as_deref();
    match cli.command {
        Command::Synth => cmd_synth(&cfg).map(drop),
        Command::Train => cmd_train(&cfg, ds).map(drop),
        Command::Eval => cmd_eval(&cfg, ds, ck).map(drop),
        Command::Analyze => cmd_analyze(&cfg, ds, ck).map(drop),
        Command::Spillover => cmd_spillover(&cfg, ds, ck).map(drop),
        Command::Ablate => {
            let rows = cmd_ablate(&cfg, ds)?;
            print!("{}", ablation_csv(&rows));
            Ok(())
        }
    }
}

/// Entry point shared by the binary and the tests. Returns the exit code:
/// 0 on success, 2 for usage errors, 1 for everything else.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
