//! armlab: deterministic driver for redistribution-hook experiments.
//!
//! Every command reads one TOML config (`--config`), derives all randomness
//! from the single top-level seed, and writes its reports plus a
//! `manifest.json` into the output directory. Reruns with the same config
//! and seed produce byte-identical artifacts; `--no-timestamp` removes the
//! only wall-clock fields so the identity holds file-for-file.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use output::Emitter;

#[derive(Parser)]
#[command(
    name = "armlab",
    version,
    about = "Deterministic experiment driver: toy transformer, activation \
             redistribution hook, insertion emulation, analytics, and \
             numeric verification."
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config's top-level seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Apply a named hook preset (mathlike-small, direct-p).
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Worker threads for the deterministic matmul partition.
    #[arg(long, global = true, value_name = "N")]
    parallel: Option<usize>,

    /// Omit wall-clock fields (manifest timestamp, bench timings) so
    /// reruns are byte-identical.
    #[arg(long, global = true)]
    no_timestamp: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded weights as a manifest + blob container.
    InitModel,
    /// One traced forward pass over the prompt.
    Forward,
    /// Seeded generation from the prompt.
    Decode,
    /// Filler-insertion emulation: residuals, sweep, coherence.
    Mless,
    /// Activation metrics, histograms, attention profile, class
    /// proportions, and a diversity probe.
    Analyze,
    /// Numeric verification suite; fails if any check fails.
    VerifyTheory {
        /// Replace every check's default tolerance.
        #[arg(long, value_name = "X")]
        tol: Option<f64>,
    },
    /// Hook time vs MLP block time at the configured size.
    BenchOverhead,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::InitModel => "init-model",
            Command::Forward => "forward",
            Command::Decode => "decode",
            Command::Mless => "mless",
            Command::Analyze => "analyze",
            Command::VerifyTheory { .. } => "verify-theory",
            Command::BenchOverhead => "bench-overhead",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.parallel {
        armlab::set_threads(n.max(1));
    }
    let config_path = cli
        .config
        .as_ref()
        .context("--config PATH is required")?;
    let mut cfg = config::load_config(config_path)?;
    config::apply_overrides(
        &mut cfg,
        cli.preset.as_deref(),
        cli.seed,
        cli.out.as_deref(),
    )?;
    cfg.validate()?;
    let hash = config::config_hash(&cfg)?;
    let mut emitter = Emitter::new(&cfg.output_dir, cli.no_timestamp)?;

    let command_name = cli.command.name();
    let mut failed_checks = false;
    match &cli.command {
        Command::InitModel => commands::init_model::run(&cfg, &mut emitter)?,
        Command::Forward => commands::forward::run(&cfg, &mut emitter)?,
        Command::Decode => commands::decode::run(&cfg, &mut emitter)?,
        Command::Mless => commands::mless::run(&cfg, &mut emitter)?,
        Command::Analyze => commands::analyze::run(&cfg, &mut emitter)?,
        Command::VerifyTheory { tol } => {
            failed_checks = !commands::verify_theory::run(&cfg, &mut emitter, *tol)?;
        }
        Command::BenchOverhead => {
            commands::bench::run(&cfg, &mut emitter, &hash, cli.no_timestamp)?
        }
    }

    let files = emitter.finish(command_name, &hash)?;
    println!(
        "{command_name}: wrote {} files to {}",
        files.len(),
        cfg.output_dir.display()
    );
    if failed_checks {
        bail!("verify-theory: one or more checks failed (see verify_theory.json)");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
