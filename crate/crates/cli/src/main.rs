//! `dint`: train, evaluate and inspect DINT, DIFF and vanilla models.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 bad configuration or
//! arguments, 3 non-finite values during training, 4 unreadable or
//! incompatible checkpoint, 5 gradient check failure.

mod commands;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dint_core::attention::AttentionKind;
use dint_core::Error;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NON_FINITE: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

/// Overrides every `--out` directory.
pub const OUT_DIR_ENV: &str = "DINT_OUT_DIR";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::new(EXIT_RUNTIME, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::ConfigParse { .. } => EXIT_CONFIG,
            Error::NonFinite { .. } => EXIT_NON_FINITE,
            Error::Format { .. } | Error::Version { .. } => EXIT_CHECKPOINT,
            _ => EXIT_RUNTIME,
        };
        Failure::new(code, e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dint", version, about = "Differential-integral attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its report and checkpoints.
    Train(TrainArgs),
    /// Retrieval accuracy grid over needles, queries, lengths and depths.
    Needle(NeedleArgs),
    /// Attention scores, row-sum audit and optional map dumps on saved tasks.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Train the ablation variants on shared data.
    Ablate(AblateArgs),
    /// Generate needle tasks as JSON lines.
    Tasks(TasksArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<AttentionKind>,
    /// Defaults to `train.steps` of the config.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NeedleArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub needles: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub queries: Vec<usize>,
    #[arg(long = "ctx-len", value_delimiter = ',', default_value = "256")]
    pub ctx_len: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub depths: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON-lines task file, as written by `dint tasks`.
    #[arg(long)]
    pub task: PathBuf,
    /// Also dump every captured attention map.
    #[arg(long)]
    pub capture: bool,
    /// Layer whose head mean is reported; defaults to the last.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Model config for the whole-model case; defaults to a 2-layer toy DINT.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = dint_core::gradcheck::TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupt the backward pass of one op (test fixture).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "dint,dint-groupnorm,dint-lambda0.8,dint-lambda0.5")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TasksArgs {
    #[arg(long, default_value_t = 4)]
    pub needles: usize,
    #[arg(long, default_value_t = 2)]
    pub queries: usize,
    #[arg(long = "ctx-len", default_value_t = 256)]
    pub ctx_len: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub depths: Vec<f64>,
    /// Tasks per depth.
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Needle(a) => commands::needle(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Tasks(a) => commands::tasks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
