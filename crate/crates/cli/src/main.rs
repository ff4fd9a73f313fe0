//! `esgld` command-line driver.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::Command;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] esgld_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "csv",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
            }
        });
        if let CliError::Core(esgld_core::Error::Divergence(report)) = self {
            obj["error"]["iteration"] = report.iteration.into();
            obj["error"]["step_size"] = report.step_size.into();
            obj["error"]["gradient_norm"] = report.gradient_norm.into();
        }
        obj
    }
}

/// Bayesian variable selection with extended stochastic gradient Langevin dynamics.
#[derive(Debug, Parser)]
#[command(name = "esgld", version)]
struct Args {
    /// Subcommand to run.
    #[arg(value_enum)]
    command: Command,

    /// Configuration file (`key = value` lines, `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed; overrides `seed` in the file.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; overrides `out` in the file.
    #[arg(long)]
    out: Option<PathBuf>,

    /// `section.key=value` overrides applied after the file.
    overrides: Vec<String>,
}

fn run(args: Args) -> Result<(), CliError> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(CliError::io(path))?,
        None => String::new(),
    };
    let overrides: BTreeMap<String, String> = config::parse_overrides(&args.overrides)?;
    let cfg = config::parse_config(args.command, &text, &overrides, args.seed, args.out)?;
    cfg.validate()?;
    commands::execute(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
