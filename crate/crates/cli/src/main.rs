//! `stcflow`: train, run and evaluate the optical-flow network from the shell.
//!
//! Exit status: 0 on success, 1 for usage, configuration or input errors,
//! 2 for numerical failures (divergence, failed invariants).

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "stcflow", version, about = "Spatio-temporal context-aware optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on synthetic pairs; writes checkpoint, log and config snapshot under the output directory.
    Train(TrainArgs),
    /// Predict the flow between two frames with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted .flo files against ground truth with the same file names.
    Eval(EvalArgs),
    /// Time the lite attention product and report FLOPs and SSIM per factor.
    Bench(BenchArgs),
    /// Run the built-in invariant suite.
    Selftest(SelftestArgs),
    /// Print the resolved configuration (defaults when no file is given).
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub frame1: PathBuf,
    #[arg(long)]
    pub frame2: PathBuf,
    #[arg(long)]
    pub out_flo: PathBuf,
    /// Optional color-coded PNG of the flow.
    #[arg(long)]
    pub out_viz: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Also write the table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated `MxN` feature sizes (positions x channels).
    #[arg(long, value_delimiter = ',', default_value = "64x8,256x16,1024x32")]
    pub sizes: Vec<String>,
    /// Comma-separated polyphase factors.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub factors: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// JSON-lines report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Random inputs of the normalization sweep.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
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
    let result = match cli.command {
        Command::Train(a) => commands::train::run(&a),
        Command::Infer(a) => commands::infer::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Bench(a) => commands::bench::run(&a),
        Command::Selftest(a) => commands::selftest::run(&a),
        Command::PrintConfig { config } => config::RunConfig::load(config.as_deref()).map(|c| print!("{}", c.to_toml())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
