//! Command-line front end. Every subcommand reads the same TOML config.

use clap::{Parser, Subcommand, ValueEnum};
use cathtwin_core::copilot::{init_session, ControlMode, Phase};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use crate::bridge::{serve, BridgeCore};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{self, load_maps, load_policy, World};
use crate::store::RunRecord;

/// Environment variable holding the log filter, e.g. `info` or `cathtwin=debug`.
pub const LOG_ENV: &str = "CATHTWIN_LOG";

#[derive(Debug, Parser)]
#[command(name = "cathtwin", version, about = "Digital twin and co-piloted control for robotic transcatheter valve delivery")]
pub struct Cli {
    /// TOML config; every key is optional. Without it the built-in defaults are used.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "master_slave")]
    MasterSlave,
    Copilot,
}

impl From<ModeArg> for ControlMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::MasterSlave => ControlMode::MasterSlave,
            ModeArg::Copilot => ControlMode::Copilot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Initialization,
    Localization,
    Releasing,
    Anchoring,
    Retraction,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Initialization => Phase::Initialization,
            PhaseArg::Localization => Phase::Localization,
            PhaseArg::Releasing => Phase::Releasing,
            PhaseArg::Anchoring => Phase::Anchoring,
            PhaseArg::Retraction => Phase::Retraction,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mesh the phantom and write phantom.stl and target.json.
    Phantom {
        /// Run directory [default: <output_dir>/phantom]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the bending-to-shape regressor on synthetic constant-curvature shapes.
    FitShape {
        /// Run directory [default: <output_dir>/shape]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the localization policy with SAC; writes policy.json and curves.csv.
    Train {
        /// Run directory [default: <output_dir>/train]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out the trained policy from seeded starts and report target errors.
    Evaluate {
        /// Run directory [default: <output_dir>/evaluate]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample policy rollouts and fit the probability maps.
    Probmap {
        /// Run directory [default: <output_dir>/probmap]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drive seeded scripted operators through the localization phase.
    Simulate {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Run directory [default: <output_dir>/simulate_<mode>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the metric table of a simulate run directory and print it as CSV.
    Metrics {
        /// A directory written by `simulate`.
        #[arg(long)]
        run: PathBuf,
        /// Run directory [default: <output_dir>/metrics]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the metric tables of two run directories metric by metric.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Run directory [default: <output_dir>/compare]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a live session to one operator console over WebSocket.
    Serve {
        /// [default: serve.port from the config]
        #[arg(long)]
        port: Option<u16>,
        /// [default: serve.mode from the config]
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// [default: serve.phase from the config]
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
    },
}

pub fn init_logging() {
    let env = env_logger::Env::default().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn report(record: &RunRecord) {
    println!("{}", serde_json::json!({"command": record.command, "summary": record.summary}));
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom { out } => report(&pipeline::run_phantom(&cfg, out.as_deref())?),
        Command::FitShape { out } => report(&pipeline::run_fit_shape(&cfg, out.as_deref())?),
        Command::Train { out } => report(&pipeline::run_train(&cfg, out.as_deref())?),
        Command::Evaluate { out } => report(&pipeline::run_evaluate(&cfg, out.as_deref())?),
        Command::Probmap { out } => report(&pipeline::run_probmap(&cfg, out.as_deref())?),
        Command::Simulate { mode, out } => report(&pipeline::run_simulate(&cfg, mode.into(), out.as_deref())?),
        Command::Metrics { run, out } => {
            let (_, csv) = pipeline::run_metrics(&cfg, &run, out.as_deref())?;
            print!("{csv}");
        }
        Command::Compare { a, b, out } => {
            let (_, report) = pipeline::run_compare(&cfg, &a, &b, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
        }
        Command::Serve { port, mode, phase } => {
            let mut s = cfg.serve;
            if let Some(p) = port {
                s.port = p;
            }
            if let Some(m) = mode {
                s.mode = m.into();
            }
            if let Some(p) = phase {
                s.phase = p.into();
            }
            run_serve(&cfg, s)?;
        }
    }
    Ok(())
}

fn run_serve(cfg: &RunConfig, s: crate::config::ServeConfig) -> Result<(), CliError> {
    let world = World::build(cfg)?;
    let env = world.env(cfg, cfg.seeds.eval)?;
    let (policy, map) = if s.mode == ControlMode::Copilot {
        (Some(load_policy(&cfg.policy_path())?.0), Some(load_maps(&cfg.maps_path())?.0))
    } else {
        (None, None)
    };
    let session = init_session(policy, map, env, s.mode, s.phase, cfg.copilot).map_err(CliError::runtime)?;
    let listener = TcpListener::bind(("0.0.0.0", s.port)).map_err(CliError::runtime)?;
    eprintln!("serving on ws://{}", listener.local_addr().map_err(CliError::runtime)?);
    serve(listener, BridgeCore::new(session, s.hold_ticks), Arc::new(AtomicBool::new(false))).map_err(CliError::runtime)?;
    Ok(())
}

/// Parse `argv`, run, and return the process exit status. Failures print a JSON error
/// object on stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
