#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use darkfocus::error::Error;

mod commands;
mod config;

use config::{ConfigError, RunConfig};

const THREADS_VAR: &str = "DARKFOCUS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "darkfocus", version, about = "Dark-focus optical tweezer modelling and calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set beam.na=0.5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Render intensity grids and report the bottle geometry.
    Beam,
    /// Run an overdamped Brownian-dynamics simulation.
    Simulate,
    /// Welch power spectrum and Lorentzian fit.
    Psd,
    /// Boltzmann-inversion calibration of the quartic coefficients.
    Calibrate,
    /// Estimate the numerical aperture by a KL-divergence sweep.
    SweepNa,
    /// Absorption ratio against a Gaussian tweezer.
    Absorb,
    /// Fit the quartic force model to a force grid.
    ForcesFit,
}

/// 1 I/O, 2 configuration, 3 numerical failure, 4 particle escape.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Escaped(_) => 4,
                Error::Io(_) => 1,
                Error::InvalidParameter { .. } => 2,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    3
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize =
            v.parse().map_err(|_| ConfigError(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(ConfigError(format!("{THREADS_VAR} must be >= 1")).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.output = out;
    }
    let run = commands::prepare(config)?;
    log::info!("{:?} -> {}", cli.command, run.out.display());
    match cli.command {
        Command::Beam => commands::beam(&run),
        Command::Simulate => commands::simulate(&run),
        Command::Psd => commands::psd(&run),
        Command::Calibrate => commands::calibrate(&run),
        Command::SweepNa => commands::sweep_na(&run),
        Command::Absorb => commands::absorb(&run),
        Command::ForcesFit => commands::forces_fit(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
