//! Command-line front end: `gencl <prompts|generate|select|stream|eval>`.
//!
//! Stages talk to each other only through files, so any stage can be re-run
//! on its own. Exit codes: 0 on success, 1 for usage and configuration
//! errors, 2 when a pipeline stage fails.

mod commands;
pub mod config;
mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gencl_core::selection::Strategy;
use thiserror::Error;

pub use config::{load_config, parse_config, ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PIPELINE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gencl",
    version,
    about = "Name-only continual learning with generated data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the prompt tree of every concept and write prompts.json.
    Prompts(CommonArgs),
    /// Render the sampled prompts with every generator and write features.jsonl.
    Generate(CommonArgs),
    /// Score the pool and write the selected coreset to coreset.json.
    Select(CommonArgs),
    /// Run the whole loop and write metrics.csv and run_manifest.json.
    Stream(CommonArgs),
    /// Compute metrics from earlier outputs and write eval_report.json.
    Eval(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replace every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the selection strategy.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Output directory, overriding paths.workdir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] gencl_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_USAGE,
            CliError::Pipeline(_) | CliError::Io { .. } => EXIT_PIPELINE,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Errors are reported on stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (name, args) = match &cli.command {
        Command::Prompts(a) => ("prompts", a),
        Command::Generate(a) => ("generate", a),
        Command::Select(a) => ("select", a),
        Command::Stream(a) => ("stream", a),
        Command::Eval(a) => ("eval", a),
    };
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.apply_seed(seed);
    }
    if let Some(strategy) = args.strategy {
        config.selection.strategy = strategy;
    }
    let config_dir = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let paths = config.resolve_paths(&config_dir, args.out.as_deref());
    let ctx = commands::Context {
        config,
        config_dir,
        paths,
    };
    log::info!("running {name} into {}", ctx.paths.workdir.display());
    match cli.command {
        Command::Prompts(_) => commands::prompts(&ctx),
        Command::Generate(_) => commands::generate(&ctx),
        Command::Select(_) => commands::select(&ctx),
        Command::Stream(_) => commands::stream(&ctx),
        Command::Eval(_) => commands::eval(&ctx),
    }
}
