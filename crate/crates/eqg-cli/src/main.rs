//! Command-line front end: loads a scenario configuration, runs one of the
//! solver/simulation/verification pipelines, and emits provenance-stamped
//! CSV/JSON results.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure
//! (blow-up or non-finite values), 4 statistical band violation under
//! `--strict`, 1 output/IO failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A command failure carrying its exit code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad or missing configuration (exit 2).
    Config(String),
    /// Numerical failure: blow-up, NaN, singular systems (exit 3).
    Numerical(String),
    /// A statistical acceptance band was violated under --strict (exit 4).
    Band(String),
    /// Output/IO failure (exit 1).
    Output(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Band(_) => 4,
            Failure::Output(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Band(m) | Failure::Output(m) => m,
        }
    }
}

/// Map a library error raised while *running* a pipeline (after the config
/// loaded cleanly) to an exit class: integration/simulation failures are
/// numerical; parameter and dimension complaints trace back to config
/// values; IO problems are output failures.
pub fn run_err(e: eqg_core::EqgError) -> Failure {
    use eqg_core::EqgError as E;
    match e {
        E::RiccatiBlowUp { .. } | E::NonFinite { .. } | E::Numerical(_) => {
            Failure::Numerical(e.to_string())
        }
        E::Io(io) => Failure::Output(io.to_string()),
        other => Failure::Config(other.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "eqg-cli",
    version,
    about = "Habit-preference equilibrium toolkit: coefficient ODEs, factor simulation, \
             market-clearing and mesh-refinement studies"
)]
struct Cli {
    /// Scenario configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the seed from the [run] section.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory (defaults to the [run] section's `out`, then ".").
    /// The environment variable MFG_EQG_OUT overrides this flag.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for internal parallelism (default: hardware count).
    #[arg(long, global = true, value_name = "INT")]
    threads: Option<usize>,

    /// Turn statistical bands into hard failures (exit 4) and omit the
    /// output timestamp line so repeated runs are byte-identical.
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate the scalar habit coefficient and its ODE residual.
    Zeta,
    /// Integrate the backward coefficient system and write it as CSV.
    SolveRiccati,
    /// Simulate one market: per-agent wealth, consumption, habit, exposure
    /// and positions, plus the common risk-premium path.
    Simulate,
    /// Estimate the market-clearing error across population sizes.
    ClearingSweep,
    /// Mesh-refinement study of the pathwise backward-equation residual.
    Residual,
    /// Evaluate the data-smallness condition and the variance bound from
    /// user-supplied constants.
    CheckSmallness,
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("missing --config PATH".into()))?;
    let scenario = config::load(config_path)?;

    let seed = cli.seed.unwrap_or(scenario.run.seed);
    let out_dir = std::env::var_os("MFG_EQG_OUT")
        .map(PathBuf::from)
        .or_else(|| cli.out.clone())
        .or_else(|| scenario.run.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let emitter = output::Emitter {
        dir: out_dir,
        config_sha256: scenario.config_sha256.clone(),
        seed,
        strict: cli.strict,
    };

    match cli.command {
        Command::Zeta => commands::cmd_zeta(&scenario, &emitter),
        Command::SolveRiccati => commands::cmd_solve_riccati(&scenario, &emitter),
        Command::Simulate => commands::cmd_simulate(&scenario, &emitter, seed),
        Command::ClearingSweep => {
            commands::cmd_clearing_sweep(&scenario, &emitter, seed, cli.strict)
        }
        Command::Residual => commands::cmd_residual(&scenario, &emitter, seed, cli.strict),
        Command::CheckSmallness => commands::cmd_check_smallness(&scenario, &emitter),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Build the global pool up front; a second initialization attempt
        // (impossible here, but harmless) would leave the default pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}
