//! `tamm`: dataset generation, staged pre-training, evaluation and
//! diagnostics.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tamm_core::TammError;

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_INCOMPATIBLE: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<TammError> for CliError {
    fn from(e: TammError) -> Self {
        let code = match &e {
            TammError::Config(_) => EXIT_CONFIG,
            TammError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            TammError::Shape(_) | TammError::Format { .. } | TammError::UnsupportedVersion { .. } => {
                EXIT_INCOMPATIBLE
            }
            _ => EXIT_CHECK,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "tamm", version, about = "Tri-modal adapter pre-training on synthetic triplets")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration sources shared by the commands that build one.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Zeroshot,
    Linear,
    Fewshot,
    Retrieve,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triplet dataset.
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Image views per sample.
        #[arg(long)]
        views: Option<usize>,
        /// Shift strength in [0, 1], or `auto`.
        #[arg(long)]
        shift: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run a pre-training stage.
    Pretrain(commands::PretrainArgs),
    /// Evaluate a checkpoint.
    Eval(commands::EvalArgs),
    /// Finite-difference audit of every differentiable op.
    Gradcheck {
        /// Perturb this op's analytic gradient (negative control).
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Summarize metric and report CSV files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let out = match cli.command {
        Command::Datagen { cfg, views, shift, out } => commands::datagen(&cfg, views, shift, &out),
        Command::Pretrain(args) => commands::pretrain(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Gradcheck { corrupt } => commands::gradcheck(corrupt.as_deref()),
        Command::Report { files } => commands::report(&files),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
