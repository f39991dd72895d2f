//! `dca`: train the toy model, evaluate attention modes, dump position matrices.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or paths. Exit code 2.
    Usage(String),
    /// Failure after validation. Exit code 3.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dca_core::Error> for CliError {
    fn from(e: dca_core::Error) -> Self {
        use dca_core::Error as E;
        match e {
            E::Config(_)
            | E::ModelConfig(_)
            | E::InvalidArgument(_)
            | E::MissingChunkConfig(_)
            | E::PasskeyTooShort { .. }
            | E::InsufficientTokens { .. }
            | E::CorpusTooShort { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<dca_core::ConfigError> for CliError {
    fn from(e: dca_core::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dca", version, about = "Dual chunk attention on a byte-level toy transformer")]
struct Cli {
    /// key=value file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model with vanilla RoPE.
    Train(TrainArgs),
    /// Sliding-window perplexity per mode and length; writes ppl.csv.
    EvalPpl(EvalPplArgs),
    /// Passkey retrieval grid; writes passkey.csv.
    Passkey(PasskeyArgs),
    /// Intra-only, intra+inter and full DCA; writes ablation.csv.
    Ablate(AblateArgs),
    /// Print a relative position matrix as TSV.
    Matrix(MatrixArgs),
}

#[derive(Args, Debug, Default)]
struct ChunkArgs {
    /// Chunk size s; defaults to 3c/4.
    #[arg(long)]
    chunk: Option<usize>,
    /// Local window w; defaults to c − s.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct OutArgs {
    /// Directory for checkpoints and CSV files [default: out]
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output checkpoint [default: <out-dir>/model.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Trailing fraction of the corpus kept out of training.
    #[arg(long)]
    heldout: Option<f64>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Training context c.
    #[arg(long)]
    ctx: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct EvalPplArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    chunk: ChunkArgs,
    /// Comma-separated attention modes.
    #[arg(long)]
    modes: Option<String>,
    /// Comma-separated evaluation lengths.
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    heldout: Option<f64>,
    /// Held-out bytes scored per length.
    #[arg(long)]
    eval_tokens: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct PasskeyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    chunk: ChunkArgs,
    #[arg(long)]
    modes: Option<String>,
    /// Comma-separated prompt lengths in bytes.
    #[arg(long)]
    lengths: Option<String>,
    /// Comma-separated depths in [0, 1].
    #[arg(long)]
    depths: Option<String>,
    /// Cases per (length, depth) cell.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct AblateArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    chunk: ChunkArgs,
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    heldout: Option<f64>,
    #[arg(long)]
    eval_tokens: Option<usize>,
    #[arg(long)]
    depths: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct MatrixArgs {
    #[arg(long)]
    len: Option<usize>,
    /// dca, rope or pi [default: dca]
    #[arg(long)]
    mode: Option<String>,
    /// Pretraining context c (dca, pi).
    #[arg(long)]
    ctx: Option<usize>,
    #[command(flatten)]
    chunk: ChunkArgs,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DCA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("DCA_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let file = config::load_config(cli.config.as_deref())?;
    let r = config::Resolver::new(file);
    match cli.command {
        Command::Train(a) => commands::train(a, r),
        Command::EvalPpl(a) => commands::eval_ppl(a, r),
        Command::Passkey(a) => commands::passkey(a, r),
        Command::Ablate(a) => commands::ablate(a, r),
        Command::Matrix(a) => commands::matrix(a, r),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
