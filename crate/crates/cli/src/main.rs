//! `smplab`: runs the liquidation experiments and the acceptance suite.
//!
//! Exit status is 0 when every check passes, 1 when a check fails and 2 on
//! configuration or I/O errors.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use smplab_core::SmpError;

use crate::config::{Format, Overrides, RunConfig};
use crate::output::Output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Numerics(#[from] SmpError),
}

#[derive(Parser, Debug)]
#[command(
    name = "smplab",
    version,
    about = "Spike-variation experiments for optimal liquidation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed from which every experiment cell derives its stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo paths per cell.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Time steps of the simulation grid.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Result format.
    #[arg(long, global = true, value_parser = ["csv", "json"])]
    format: Option<String>,
    /// Print the plan without computing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Time levels of the finite-difference grid.
    #[arg(long, global = true)]
    nt: Option<usize>,
    /// Inventory nodes of the finite-difference grid.
    #[arg(long, global = true)]
    nq: Option<usize>,
    /// Largest inventory on the finite-difference grid.
    #[arg(long, global = true)]
    qmax: Option<f64>,
    /// Maximal trading rate.
    #[arg(long, global = true)]
    cplus: Option<f64>,
    /// Trading horizon.
    #[arg(long, global = true)]
    horizon: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo value of the base policy, compared to the closed form.
    Value,
    /// Spike-variation census, stopping-time identities and divergence table.
    Perturb,
    /// Corrected and standard maximum-principle comparison tables.
    Smp,
    /// Finite-difference solution of the example's HJB equation.
    Hjb,
    /// Evaluates a closed-form formula: value, control, w, fbar, tau-theta, divergence.
    Oracle {
        formula: String,
        #[arg(allow_negative_numbers = true)]
        args: Vec<f64>,
    },
    /// Runs the full acceptance suite.
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Value => "value",
            Command::Perturb => "perturb",
            Command::Smp => "smp",
            Command::Hjb => "hjb",
            Command::Oracle { .. } => "oracle",
            Command::All => "all",
        }
    }
}

fn overrides(g: &GlobalArgs, command: &Command) -> Result<Overrides, CliError> {
    let format = g
        .format
        .as_deref()
        .map(str::parse::<Format>)
        .transpose()
        .map_err(CliError::Config)?;
    // Formulas are deterministic, so they need no seed.
    let seed = match command {
        Command::Oracle { .. } => g.seed.or(Some(0)),
        _ => g.seed,
    };
    Ok(Overrides {
        seed,
        paths: g.paths,
        steps: g.steps,
        out: g.out.clone(),
        format,
        nt: g.nt,
        nq: g.nq,
        q_max: g.qmax,
        c_plus: g.cplus,
        horizon: g.horizon,
    })
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("SMPLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "SMPLAB_THREADS must be a positive integer, got `{value}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<bool, CliError> {
    configure_threads()?;
    let flags = overrides(&cli.global, &cli.command)?;
    let config = RunConfig::load(cli.global.config.as_deref(), &flags)?;
    let name = cli.command.name();

    if let Command::Oracle { formula, args } = &cli.command {
        let result = commands::oracle(formula, args, &config)?;
        println!("{}", serde_json::to_string_pretty(&result).expect("json"));
        return Ok(true);
    }
    if cli.global.dry_run {
        for line in commands::plan(name, &config) {
            println!("{line}");
        }
        println!("outputs would go to {}", config.out.display());
        return Ok(true);
    }

    let clock = Instant::now();
    let mut out = Output::new(&config)?;
    let passed = match cli.command {
        Command::Value => commands::value(&config, &mut out)?,
        Command::Perturb => commands::perturb(&config, &mut out)?,
        Command::Smp => commands::smp(&config, &mut out)?,
        Command::Hjb => commands::hjb(&config, &mut out)?,
        Command::All => commands::all(&config, &mut out)?,
        Command::Oracle { .. } => unreachable!("handled above"),
    };
    out.metadata(name, clock.elapsed().as_secs_f64(), passed)?;
    for path in out.written() {
        eprintln!("wrote {}", path.display());
    }
    Ok(passed)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors by itself.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
