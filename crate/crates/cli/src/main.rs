//! `flor`: registration, landscapes, synthetic phantoms, histograms and volume
//! conversion from the command line.
//!
//! Settings are resolved in increasing precedence: built-in defaults, the
//! `--config` file, `--set key=value` overrides, then dedicated flags such as
//! `--fixed` or `--out`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flor_core::FlorError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("optimization failed: {0}")]
    Optimization(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Optimization(_) => 3,
        }
    }
}

impl From<FlorError> for CliError {
    fn from(e: FlorError) -> Self {
        match e {
            FlorError::Io { .. }
            | FlorError::Header(_)
            | FlorError::SizeMismatch { .. }
            | FlorError::NonFinite(_)
            | FlorError::DimensionMismatch(..)
            | FlorError::Serde(_) => CliError::Io(e.to_string()),
            FlorError::NonFiniteLoss(_)
            | FlorError::DegenerateDirection(_)
            | FlorError::ZeroVariance
            | FlorError::ZeroMass => CliError::Optimization(e.to_string()),
            FlorError::InvalidParameter(_) | FlorError::NotDifferentiable(_) | FlorError::LengthMismatch(..) => {
                CliError::Config(e.to_string())
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flor", version, about = "First-order locally orderless image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set similarity.lambda=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed one.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fixed: Option<PathBuf>,
        #[arg(long)]
        moving: Option<PathBuf>,
        /// Output prefix.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Objective values over a grid of in-plane translations.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fixed: Option<PathBuf>,
        #[arg(long)]
        moving: Option<PathBuf>,
        /// CSV path; with several (measure, order) pairs, `.<measure>-<order>` is inserted before the extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a blob phantom from a TOML or JSON description.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a Parzen histogram of one volume, or the joint histogram of two.
    Hist {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..=2)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Histogram the lifted gradient images, pooled over directions.
        #[arg(long)]
        lifted: bool,
    },
    /// Convert between NRRD and RAW (+ JSON sidecar).
    Convert { input: PathBuf, output: PathBuf },
}

fn init_threads(configured: usize) -> Result<(), CliError> {
    let n = if configured > 0 {
        configured
    } else {
        match std::env::var("FLOR_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("FLOR_THREADS must be a thread count, got `{v}`")))?,
            Err(_) => 0,
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Register {
            common,
            fixed,
            moving,
            out,
        } => {
            let mut cfg = config::RunConfig::load(common.config.as_deref(), &common.sets)?;
            init_threads(cfg.threads)?;
            cfg.io.fixed = fixed.or(cfg.io.fixed);
            cfg.io.moving = moving.or(cfg.io.moving);
            cfg.io.out = out.or(cfg.io.out);
            commands::register(&cfg)
        }
        Command::Landscape {
            common,
            fixed,
            moving,
            out,
        } => {
            let mut cfg = config::RunConfig::load(common.config.as_deref(), &common.sets)?;
            init_threads(cfg.threads)?;
            cfg.io.fixed = fixed.or(cfg.io.fixed);
            cfg.io.moving = moving.or(cfg.io.moving);
            cfg.io.out = out.or(cfg.io.out);
            commands::landscape(&cfg)
        }
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Hist {
            common,
            input,
            out,
            lifted,
        } => {
            let cfg = config::RunConfig::load(common.config.as_deref(), &common.sets)?;
            init_threads(cfg.threads)?;
            commands::hist(&cfg, &input, &out, lifted)
        }
        Command::Convert { input, output } => commands::convert(&input, &output),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flor: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
