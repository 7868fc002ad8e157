//! Argument parsing and dispatch for the `windcast` binary. Kept as a
//! library so integration tests can drive the exact command surface
//! without spawning processes.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

#[derive(Debug, Parser)]
#[command(
    name = "windcast",
    version,
    about = "Wind power forecasting pipeline over 10-minute turbine records"
)]
pub struct Cli {
    /// Run configuration in TOML; every field has a default.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Print the effective configuration (file + overrides) and exit.
    #[arg(long, global = true)]
    pub show_config: bool,

    /// Single seed overriding init, shuffle, and sample seeds alike.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Where artifacts and the config echo land.
    #[arg(long, global = true, value_name = "PATH", default_value = ".")]
    pub output_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarize the dataset: counts and per-role gap percentages.
    Inspect {
        /// Dotted config overrides, e.g. data.path=wind.csv
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Fit the forecaster; write checkpoint, scaler, profile, loss history.
    Train {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Forecast 288 steps per turbine from saved artifacts.
    Predict {
        /// Start step of the input window; defaults to the last full one.
        #[arg(long, value_name = "STEP")]
        at_step: Option<usize>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Backtest on the validation split against persistence.
    Evaluate {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck,
}

/// Runs one parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let overrides: &[String] = match &cli.command {
        Command::Inspect { overrides }
        | Command::Train { overrides }
        | Command::Predict { overrides, .. }
        | Command::Evaluate { overrides } => overrides,
        Command::Gradcheck => &[],
    };
    let cfg = config::load_config(cli.config.as_deref(), overrides, cli.seed)?;
    if cli.show_config {
        print!("{}", config::to_toml(&cfg)?);
        return Ok(0);
    }
    match cli.command {
        Command::Inspect { .. } => {
            print!("{}", commands::cmd_inspect(&cfg, &cli.output_dir)?);
            Ok(0)
        }
        Command::Train { .. } => {
            print!("{}", commands::cmd_train(&cfg, &cli.output_dir)?);
            Ok(0)
        }
        Command::Predict { at_step, .. } => {
            print!("{}", commands::cmd_predict(&cfg, &cli.output_dir, at_step)?);
            Ok(0)
        }
        Command::Evaluate { .. } => {
            print!("{}", commands::cmd_evaluate(&cfg, &cli.output_dir)?);
            Ok(0)
        }
        Command::Gradcheck => {
            let (text, ok) = commands::cmd_gradcheck()?;
            print!("{text}");
            Ok(if ok { 0 } else { 1 })
        }
    }
}
