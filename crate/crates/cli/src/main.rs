//! `hsid` command-line driver.

mod commands;
mod config;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hsid::HsidError;

#[derive(Parser)]
#[command(name = "hsid", version, about = "Multi-stage hyperspectral denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenToy(Common),
    /// Fit the explicit noise model to calibration pairs.
    Calibrate(Common),
    /// Run one training stage or all three.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Denoise every noisy cube of a manifest.
    Denoise(Common),
    /// Score a checkpoint on the test manifest and write reports.
    Eval(Common),
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn state(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    /// Validation failures of configuration values.
    pub fn from_core_config(e: HsidError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<HsidError> for CliError {
    fn from(e: HsidError) -> Self {
        let code = match e {
            HsidError::Argument(_) | HsidError::Config(_) => 2,
            HsidError::State(_) => 3,
            HsidError::Numeric { .. } => 4,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenToy(c) => commands::gen_toy(&c.load()?),
        Command::Calibrate(c) => commands::calibrate(&c.load()?),
        Command::Train { common, stage } => {
            let stages: &[u8] = match stage {
                StageArg::One => &[1],
                StageArg::Two => &[2],
                StageArg::Three => &[3],
                StageArg::All => &[1, 2, 3],
            };
            commands::train(&common.load()?, stages)
        }
        Command::Denoise(c) => commands::denoise(&c.load()?),
        Command::Eval(c) => commands::eval(&c.load()?),
    }
}

impl Common {
    fn load(&self) -> Result<commands::Context, CliError> {
        let (cfg, base) = config::RunConfig::load(self.config.as_deref(), self.seed)?;
        let paths = cfg.paths(&base);
        Ok(commands::Context { cfg, paths })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
