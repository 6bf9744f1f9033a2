//! `romrl` command-line driver.
//!
//! Every run starts from one versioned TOML config; its hash is stamped
//! into all artifacts.  Exit codes: 0 success, 1 numerical failure,
//! 2 configuration or I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use romrl::Error;

use romrl_cli::{commands, config};

#[derive(Debug, Parser)]
#[command(name = "romrl", version, about = "Adaptive ROM-based RL toolkit")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rayon worker threads (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Deploy a controller on the plant and record the episode.
    Episode {
        /// Output episode directory.
        #[arg(long)]
        out: PathBuf,
        /// Force an uncontrolled episode regardless of the schedule.
        #[arg(long)]
        uncontrolled: bool,
        /// Added to the configured seed (distinct realizations).
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Controller checkpoint overriding the [controller] section.
        #[arg(long)]
        controller: Option<PathBuf>,
    },
    /// Identify a basis and a ROM from recorded episodes.
    Fit {
        /// Episode directories (hash-checked against the config).
        #[arg(long, required = true, num_args = 1..)]
        episodes: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the adaptive ROM-RL training loop.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a controller on the plant.
    Eval {
        #[arg(long)]
        out: PathBuf,
        /// Controller checkpoint overriding the [controller] section.
        #[arg(long)]
        controller: Option<PathBuf>,
    },
    /// Verify reverse-mode gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Verify the integrator step size of a fitted ROM.
    StepCheck {
        /// ROM checkpoint from `fit`.
        #[arg(long)]
        rom: PathBuf,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
    },
    /// Compare linear+residual, residual-only, and linear-only fits.
    AblateLinear {
        #[arg(long, required = true, num_args = 1..)]
        episodes: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Residual training epochs per variant (equal budgets).
        #[arg(long, default_value_t = 500)]
        epochs: usize,
    },
    /// Jointly optimize a feedback sensor position and the controller.
    PlaceSensors {
        /// ROM checkpoint from `fit`.
        #[arg(long)]
        rom: PathBuf,
        /// Basis checkpoint from `fit`.
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        iterations: usize,
        /// Initial sensor position.
        #[arg(long, default_value_t = 1.0)]
        x0: f64,
        #[arg(long, default_value_t = 0.0)]
        y0: f64,
    },
    /// Fit the reduced-state to surface-pressure map.
    PressureMap {
        #[arg(long, required = true, num_args = 1..)]
        episodes: Vec<PathBuf>,
        /// Basis checkpoint from `fit`.
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Dimension(_)
        | Error::Unsupported(_)
        | Error::Integrity(_)
        | Error::Io(_) => 2,
        Error::Divergence { .. } | Error::RankDeficient { .. } | Error::Numerical(_) => 1,
    }
}

fn require_config(cli: &Cli) -> romrl::Result<config::LoadedConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("this command needs --config"))?;
    config::load_config(path)
}

fn run(cli: &Cli) -> romrl::Result<()> {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    }
    match &cli.command {
        Command::Episode { out, uncontrolled, seed_offset, controller } => {
            let cfg = require_config(cli)?;
            commands::episode::run(&cfg, out, *uncontrolled, *seed_offset, controller.as_deref())
        }
        Command::Fit { episodes, out } => {
            let cfg = require_config(cli)?;
            commands::fit::run(&cfg, episodes, out)
        }
        Command::Train { out } => {
            let cfg = require_config(cli)?;
            commands::train::run(&cfg, out)
        }
        Command::Eval { out, controller } => {
            let cfg = require_config(cli)?;
            commands::eval::run(&cfg, out, controller.as_deref())
        }
        Command::GradCheck { instances, tolerance } => {
            let seed = cli.config.as_ref().map_or(Ok(0), |p| {
                config::load_config(p).map(|c| c.run.seed)
            })?;
            commands::checks::grad_check(*instances, *tolerance, seed)
        }
        Command::StepCheck { rom, horizon } => commands::checks::step_check(rom, *horizon),
        Command::AblateLinear { episodes, out, epochs } => {
            let cfg = require_config(cli)?;
            commands::ablate::run(&cfg, episodes, out, *epochs)
        }
        Command::PlaceSensors { rom, basis, out, iterations, x0, y0 } => {
            let cfg = require_config(cli)?;
            commands::place::run(&cfg, rom, basis, out, *iterations, *x0, *y0)
        }
        Command::PressureMap { episodes, basis, out } => {
            let cfg = require_config(cli)?;
            commands::pressure::run(&cfg, episodes, basis, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
