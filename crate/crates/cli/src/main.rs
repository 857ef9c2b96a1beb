//! `frd`: construct, verify and sample finite-range decompositions.

mod commands;
mod output;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use finite_range::cache::KernelCache;
use serde_json::json;

use crate::settings::{CommandOverrides, Overrides, Settings};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Library(#[from] finite_range::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Library(e) => e.kind(),
            CliError::Io(_) => "Io",
            CliError::Json(_) => "Json",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "frd", version, about = "Finite-range multiscale decompositions of lattice Green's functions")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Poisson kernel of a cube, its defect bound and a random-walk cross-check.
    Poisson(CommandOverrides),
    /// Averaging kernel A^a_{ε_n,m}(R_m).
    Averaging(CommandOverrides),
    /// Fluctuation covariance Γ^a_ε at the level-n spacing.
    Fluctuation(CommandOverrides),
    /// Rescaled levels Γ_j, j < n, and the reconstruction of G^a.
    Decompose(CommandOverrides),
    /// Lévy kernels for (-Δ)^{-α/2}.
    Levy(CommandOverrides),
    /// Sample the synthesized multiscale field.
    Sample(CommandOverrides),
    /// Run the verification suite.
    Verify(CommandOverrides),
}

impl Command {
    fn parts(&self) -> (&'static str, &CommandOverrides) {
        match self {
            Command::Poisson(c) => ("poisson", c),
            Command::Averaging(c) => ("averaging", c),
            Command::Fluctuation(c) => ("fluctuation", c),
            Command::Decompose(c) => ("decompose", c),
            Command::Levy(c) => ("levy", c),
            Command::Sample(c) => ("sample", c),
            Command::Verify(c) => ("verify", c),
        }
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let (name, cmd) = cli.command.parts();
    let settings = Settings::resolve(&cli.overrides, cmd)?;
    if let Some(n) = settings.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cache = match &settings.cache_dir {
        Some(dir) => KernelCache::with_dir(dir)?,
        None => KernelCache::new(),
    };
    let report = match &cli.command {
        Command::Poisson(_) => commands::poisson(&settings, &cache)?,
        Command::Averaging(_) => commands::averaging(&settings, &cache)?,
        Command::Fluctuation(_) => commands::fluctuation(&settings, &cache)?,
        Command::Decompose(_) => commands::decompose_cmd(&settings, &cache)?,
        Command::Levy(_) => commands::levy(&settings, &cache)?,
        Command::Sample(_) => commands::sample(&settings, &cache)?,
        Command::Verify(_) => commands::verify_cmd(&settings, &cache)?,
    };
    for c in &report.checks {
        log::info!("{}", c.line());
    }
    let json = report.to_json(name, &settings)?;
    if let Some(dir) = &settings.out {
        report.write(dir, &json)?;
    }
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = json!({"schema": output::SCHEMA, "error": e.kind(), "message": e.to_string()});
            println!("{}", serde_json::to_string_pretty(&msg).unwrap_or_default());
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
