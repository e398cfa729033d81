mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use timekernel::Error;

#[derive(Parser, Debug)]
#[command(
    name = "timekernel",
    version,
    about = "Time-embedding experiments on continuous-time event sequences"
)]
struct Cli {
    /// Directory for outputs (default: runs/<subcommand>)
    #[arg(long, global = true, env = "TIMEKERNEL_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Write a synthetic dataset as train/valid/test JSONL
    Generate(GenerateArgs),
    /// Monte-Carlo error of random Fourier features against a known kernel
    KernelApprox(KernelApproxArgs),
    /// Fourier eigenfunction residuals and truncation decay of a periodic kernel
    MercerCheck(MercerCheckArgs),
    /// Train one model and evaluate the best checkpoint
    Train(TrainArgs),
    /// Train one model per value of d or k
    Sweep(SweepArgs),
    /// Export feature maps, Gram matrices or attention weights from a checkpoint
    Export(ExportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::KernelApprox(_) => "kernel-approx",
            Command::MercerCheck(_) => "mercer-check",
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
            Command::Export(_) => "export",
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[arg(long, default_value = "gap-rule")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    counts: CountArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
struct CountArgs {
    /// Override the task's training sequence count
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_valid: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct KernelApproxArgs {
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
    d_list: Vec<usize>,
    /// Independent frequency draws per d
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deviation level for the uniform-error bound column
    #[arg(long, default_value_t = 0.5)]
    eps: f64,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// CSV file name inside the output directory
    #[arg(long, default_value = "kernel_approx.csv")]
    out: String,
}

#[derive(Args, Debug, Serialize)]
struct MercerCheckArgs {
    #[arg(long, default_value = "triangle")]
    kernel: String,
    #[arg(long, default_value_t = 31)]
    jmax: usize,
    #[arg(long, default_value_t = 4096)]
    quad_points: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MonitorArg {
    Accuracy,
    Ndcg10,
}

#[derive(Args, Debug, Clone, Serialize)]
struct DataArgs {
    /// Synthetic task to generate
    #[arg(long, default_value = "gap-rule", conflicts_with = "data_dir")]
    task: String,
    /// Directory with train.jsonl, valid.jsonl and test.jsonl instead of a synthetic task
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Vocabulary size for --data-dir (default: largest event id + 1)
    #[arg(long, requires = "data_dir")]
    vocab: Option<usize>,
    /// Seed for the synthetic data (default: --seed)
    #[arg(long)]
    data_seed: Option<u64>,
    #[command(flatten)]
    counts: CountArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ModelArgs {
    /// Base model config (TOML); flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    embedder: Option<String>,
    /// Fourier degree (mercer only)
    #[arg(long)]
    k: Option<usize>,
    /// Base frequencies (mercer) or sampled frequencies (bochner-*)
    #[arg(long)]
    d: Option<usize>,
    /// Drop the constant term (mercer only)
    #[arg(long)]
    no_intercept: bool,
    /// Share coefficients between cos and sin terms (mercer only)
    #[arg(long)]
    tied: bool,
    /// Learn the base frequencies (mercer only)
    #[arg(long)]
    train_freqs: bool,
    #[arg(long)]
    event_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct OptimArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    monitor: Option<MonitorArg>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    /// Parameter to vary: d or k
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ExportWhat {
    Phi,
    Gram,
    Attention,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[arg(long, value_enum)]
    what: ExportWhat,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Expected model config; loading fails if the checkpoint differs
    #[arg(long)]
    config: Option<PathBuf>,
    /// Time grid as start:stop:step or a comma list. For attention the
    /// values are offsets after the last event of the sequence.
    #[arg(long, default_value = "0:10:0.5")]
    grid: String,
    /// JSONL file holding the sequence for attention export
    #[arg(long)]
    sequence_file: Option<PathBuf>,
    /// Line of --sequence-file (0-based), or test sequence index when generated
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Seed for the generated periodic sequence when no file is given
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let out_dir = cli
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    match commands::run(&cli.command, &out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
