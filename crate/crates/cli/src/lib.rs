//! Command-line front end: experiment configuration, execution and result
//! files.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Fault;
use crate::config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0} check suite(s) failed")]
    Checks(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Checks(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bml-fbsde",
    version,
    about = "Backward measurability loss experiments for FBSDEs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            repeats: self.repeats,
        });
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Empirical (and closed-form) BML over a grid of linear-trial parameters.
    Sweep(ConfigArgs),
    /// Repeated training runs with per-step metrics.
    Train(ConfigArgs),
    /// Monte Carlo reference value of Y0 for the HJB problem.
    OracleY0(ConfigArgs),
    /// Runs the property suites at small scale.
    Checks {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break one component on purpose to confirm the suites notice.
        #[arg(long, value_enum)]
        fault: Option<Fault>,
    },
    /// Errors of averaged trained trials against the coupled reference solution.
    ErrorPaths(ConfigArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sweep(a) => {
            let path = commands::cmd_sweep(&a.load()?)?;
            println!("wrote {}", path.display());
        }
        Command::Train(a) => {
            let s = commands::cmd_train(&a.load()?)?;
            println!(
                "{} runs completed, {} excluded; final BML {:.6} ± {:.6}",
                s.completed,
                s.excluded,
                s.bml.mean,
                3.0 * s.bml.std_error
            );
            if let (Some(star), Some(rel)) = (s.y0_star, s.rel_error) {
                println!(
                    "y0 prediction {:.5}, reference {star:.5}, relative error {rel:.4}",
                    s.y0_pred
                );
            }
        }
        Command::OracleY0(a) => {
            let s = commands::cmd_oracle_y0(&a.load()?)?;
            println!("Y0 = {:.6} ± {:.6} (M = {})", s.value, s.std_error, s.samples);
        }
        Command::Checks { seed, fault } => {
            let outcomes = commands::cmd_checks(seed, fault);
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                return Err(CliError::Checks(failed));
            }
        }
        Command::ErrorPaths(a) => {
            let s = commands::cmd_error_paths(&a.load()?)?;
            println!(
                "averaged {} runs; mse_y(0) = {:.3e}, mse_y(T) = {:.3e}",
                s.runs_averaged, s.mse_y_initial, s.mse_y_terminal
            );
        }
    }
    Ok(())
}

/// Sizes the global worker pool from `BML_FBSDE_THREADS` when it is set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("BML_FBSDE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("BML_FBSDE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn main_with(cli: Cli) -> ExitCode {
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
