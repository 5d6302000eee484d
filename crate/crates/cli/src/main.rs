//! `psbr`: train sparse toy models, export them to BSR, run inference and
//! sweep block shapes.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 numerical divergence.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "psbr", version, about = "Proximal sparse training and block-sparse inference")]
pub struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` config file, or any CSV, JSON or PSBR file this tool wrote.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy model; writes checkpoint.psbr and trajectory.csv.
    Train(TrainArgs),
    /// Convert a checkpoint's weights to BSR.
    ExportBsr(ExportArgs),
    /// Multiply a BSR weight by a dense input; prints `mean_ms / std_ms`.
    Infer(InferArgs),
    /// Time SpMM against the dense kernel across block shapes.
    BenchSweep(SweepArgs),
    /// Pretty-print a sweep report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// lasso or tinynet.
    #[arg(long)]
    pub problem: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub mu: Option<String>,
    /// `tied` or a number.
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub ell_max: Option<String>,
    /// Steps between reweightings, or `none`.
    #[arg(long)]
    pub reweight_every: Option<String>,
    /// constant, linear_decay or cosine.
    #[arg(long)]
    pub schedule: Option<String>,
    /// paper or textbook.
    #[arg(long)]
    pub convention: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    /// Prox block shape, `RxC`.
    #[arg(long)]
    pub block_shape: Option<String>,
    #[arg(long)]
    pub pad: bool,
    /// Plain AdamW.
    #[arg(long)]
    pub no_prox: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub block_shape: Option<String>,
    #[arg(long)]
    pub pad: bool,
    /// Store `1xN` blocks for an `Nx1` block shape.
    #[arg(long)]
    pub transpose: bool,
    #[arg(long)]
    pub zero_tol: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// BSR container with the weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Container with the dense input.
    #[arg(long)]
    pub input: PathBuf,
    /// Output container.
    #[arg(long)]
    pub out: PathBuf,
    /// Weight section; optional when there is only one.
    #[arg(long)]
    pub tensor: Option<String>,
    /// Input section; optional when there is only one.
    #[arg(long)]
    pub input_tensor: Option<String>,
    /// Multiply by the transpose of the input.
    #[arg(long)]
    pub transpose_input: bool,
    /// reference or vectorized.
    #[arg(long)]
    pub path: Option<String>,
    #[arg(long)]
    pub repeats: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Output directory for sweep.json and sweep.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub d: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub sparsity: Option<String>,
    /// Single block shape; overrides `--shapes`.
    #[arg(long)]
    pub block_shape: Option<String>,
    /// Comma-separated block shapes.
    #[arg(long)]
    pub shapes: Option<String>,
    /// Comma-separated kernel paths.
    #[arg(long)]
    pub paths: Option<String>,
    /// Comma-separated modes.
    #[arg(long)]
    pub modes: Option<String>,
    #[arg(long)]
    pub repeats: Option<String>,
    #[arg(long)]
    pub threads: Option<String>,
    /// Pin the sweep to a core (default 0).
    #[arg(long, num_args = 0..=1, default_missing_value = "0")]
    pub pin_core: Option<String>,
    #[arg(long)]
    pub pad: bool,
    /// Use `1xN` instead of `Nx1` blocks.
    #[arg(long)]
    pub transpose: bool,
    /// Skip configuration measurement and use the fallback.
    #[arg(long)]
    pub no_autotune: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// sweep.json written by bench-sweep.
    pub report: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
