//! `a2n` command-line front end.
//!
//! ```text
//! a2n <prepare|train|eval|analyze|ablate|gradcheck> [--config run.json] [--dotted.key value ...]
//! ```
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or config error,
//! 3 verification failure (gradient check, checkpoint CRC).

mod commands;
mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] a2n_core::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use a2n_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Json(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::Usage(_) | E::Argument(_) | E::Json(_) | E::ConfigMismatch { .. } => 2,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                E::CorruptCheckpoint(_) | E::UnreliableCheck(_) => 3,
                _ => 1,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "a2n", version, about = "Attention-in-attention super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write bicubic LR images next to (a copy of) an HR directory.
    Prepare(RunArgs),
    /// Train a model and write checkpoints and the loss curve.
    Train(RunArgs),
    /// Score a checkpoint on `val_dir` against interpolation baselines.
    Eval(RunArgs),
    /// Attention statistics, heatmaps and the branch-weight ranking.
    Analyze(RunArgs),
    /// Train and score every variant of an ablation study.
    Ablate(RunArgs),
    /// Finite-difference check of the backward pass.
    Gradcheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides as `--dotted.key value` or `--dotted.key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("A2N_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("A2N_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (name, args) = match &cli.command {
        Command::Prepare(a) => ("prepare", a),
        Command::Train(a) => ("train", a),
        Command::Eval(a) => ("eval", a),
        Command::Analyze(a) => ("analyze", a),
        Command::Ablate(a) => ("ablate", a),
        Command::Gradcheck(a) => ("gradcheck", a),
    };
    let mut overrides = config::parse_overrides(&args.overrides)?;
    // `--config` after the first override lands among the overrides
    let mut file = args.config.clone();
    if let Some(i) = overrides.iter().position(|(k, _)| k == "config") {
        let (_, v) = overrides.remove(i);
        match (v, &file) {
            (Value::String(p), None) => file = Some(PathBuf::from(p)),
            _ => return Err(CliError::Config("--config given twice or not a path".into())),
        }
    }
    let cfg = config::resolve(file.as_deref(), &overrides)?;
    let resolved = cfg.write_resolved()?;
    log::info!("{name}: resolved config in {}", resolved.display());
    match cli.command {
        Command::Prepare(_) => commands::prepare(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Analyze(_) => commands::analyze(&cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
        Command::Gradcheck(_) => commands::gradcheck(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
