//! `classpoison` command-line front end.
//!
//! Exit status: 0 on success, 2 on a configuration error, 1 on a runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "classpoison", version, about = "Class-oriented poisoning experiments on MLP classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the base model and write checkpoint.json and pretrain_log.csv.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (defaults to `output.dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured attack against a pretrained checkpoint.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize one run directory or a directory of runs.
    Report {
        /// Directory holding the runs.
        #[arg(long)]
        out: PathBuf,
        /// Accepted for symmetry with the other commands; not read.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<classpoison::Error> for CliError {
    fn from(e: classpoison::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| ConfigError::new("output.dir", "no output directory: pass --out or set output.dir").into())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { config, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(out, &cfg)?;
            commands::cmd_pretrain(&cfg, seed, &out)
        }
        Command::Attack {
            config,
            seed,
            checkpoint,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(out, &cfg)?;
            if !checkpoint.is_file() {
                return Err(ConfigError::new("--checkpoint", format!("file not found: {}", checkpoint.display())).into());
            }
            commands::cmd_attack(&cfg, seed, &checkpoint, &out)
        }
        Command::Report { out, .. } => commands::cmd_report(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
