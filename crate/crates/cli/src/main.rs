mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "maskvid", version, about = "Masked video pretraining on frame pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain an encoder/decoder pair on a frame-sequence directory.
    Pretrain(PretrainArgs),
    /// Mask and reconstruct a pair of frames with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Score label propagation with frozen encoder features.
    Eval(EvalArgs),
    /// Write a synthetic moving-shapes dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, num_args = 2, value_names = ["FRAME1", "FRAME2"])]
    pub pair: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    pub ckpt: Option<PathBuf>,
    /// Evaluate freshly initialized weights instead of a checkpoint.
    #[arg(long)]
    pub random_init: bool,
    /// Architecture and seed for --random-init (desk defaults otherwise).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the EMA target weights of the checkpoint instead of the online ones.
    #[arg(long)]
    pub target: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub stage: usize,
    #[arg(long, default_value_t = 7)]
    pub k: usize,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
    #[arg(long, default_value_t = 3)]
    pub context: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub sequences: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Eval(a) => commands::eval(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
