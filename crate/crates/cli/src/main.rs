//! `exval` command-line front end.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "exval", version, about = "Multi-site treatment-effect extrapolation")]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Per-site effect estimates (effects.csv).
    Estimate,
    /// Cochran Q and wSF tests (heterogeneity.json).
    Heterogeneity,
    /// Dyadic prediction errors and external validity functions.
    Evf,
    /// Extrapolate to a target, or leave-one-out over all sites.
    Extrapolate,
    /// Evidence-accumulation replay by census year.
    Cumulative,
    /// Rank candidate sites.
    SiteSelect,
    /// Experiment-or-extrapolate decision for a target.
    Decide,
    /// Generate a synthetic evidence base.
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Heterogeneity => "heterogeneity",
            Command::Evf => "evf",
            Command::Extrapolate => "extrapolate",
            Command::Cumulative => "cumulative",
            Command::SiteSelect => "site-select",
            Command::Decide => "decide",
            Command::Simulate => "simulate",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration")]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] exval::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    command: Option<&'a str>,
    kind: &'a str,
    errors: Vec<String>,
}

fn report(command: Option<Command>, err: &CliError) -> ExitCode {
    let (kind, errors, code) = match err {
        CliError::Config(list) => ("config", list.clone(), 2),
        CliError::Core(e) => ("runtime", vec![e.to_string()], 1),
        CliError::Io { .. } => ("io", vec![err.to_string()], 1),
        CliError::Json(e) => ("serialization", vec![e.to_string()], 1),
    };
    let r = ErrorReport {
        command: command.map(Command::name),
        kind,
        errors,
    };
    eprintln!("{}", serde_json::to_string(&r).unwrap_or_else(|_| format!("{err}")));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report(None, &CliError::Config(vec![e.to_string().trim().to_string()]));
        }
    };
    let command = cli.command;
    match run(cli, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(Some(command), &e),
    }
}

fn run(cli: Cli, command: Command) -> Result<(), CliError> {
    let mut problems = Vec::new();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p).unwrap_or_else(|e| {
            problems.extend(e);
            RunConfig::default()
        }),
        None => RunConfig::default(),
    };
    cfg.apply(cli.overrides, &mut problems);
    if cli.threads == Some(0) {
        problems.push("`--threads` must be positive".into());
    }
    problems.extend(cfg.validate(command));
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    commands::dispatch(command, &cfg)
}
