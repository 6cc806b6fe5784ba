//! `wsnn` command-line runner.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for configuration errors
//! (bad flags, unknown config keys, missing input files).

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wsnn::window::{MsMode, WindowMode};

use crate::config::Overrides;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<wsnn::error::Error> for Failure {
    fn from(e: wsnn::error::Error) -> Self {
        use wsnn::error::Error;
        match e {
            Error::Config(m) | Error::Spec(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "wsnn",
    version,
    about = "Train, evaluate and cost windowed spiking networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network; writes a checkpoint, history and energy report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Energy of raw operation counts, a checkpoint or a stored spike trace.
    AnalyzeEnergy {
        /// Add and multiply counts.
        #[arg(long, num_args = 2, value_names = ["ADDS", "MULTS"])]
        from_counts: Option<Vec<f64>>,
        #[arg(long, conflicts_with = "from_counts")]
        checkpoint: Option<PathBuf>,
        /// Spike trace JSON, used with --network.
        #[arg(long, conflicts_with_all = ["from_counts", "checkpoint"], requires = "network")]
        trace: Option<PathBuf>,
        /// Network TOML, used with --trace.
        #[arg(long, requires = "trace")]
        network: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Area analysis of the fusion surface over a list of angles.
    SweepTheta {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated angles; overrides `fusion.thetas`.
        #[arg(long)]
        thetas: Option<String>,
        /// Adds the final loss of a 3-epoch training run per angle.
        #[arg(long)]
        train_smoke: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plain-text summary of a training output directory.
    ExportReport {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `report.txt` inside the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WindowArg {
    Dilated,
    NonDilated,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MsArg {
    Activate,
    Passthrough,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Training images in the byte-record format (`data.train_path`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Held-out images (`data.test_path`).
    #[arg(long)]
    test_dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// `fusion.theta`
    #[arg(long)]
    theta: Option<f64>,
    /// `fusion.th`
    #[arg(long)]
    th: Option<f64>,
    /// `window.mode`
    #[arg(long, value_enum)]
    window_mode: Option<WindowArg>,
    /// `window.ms_mode`
    #[arg(long, value_enum)]
    ms_mode: Option<MsArg>,
    /// `train.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// `model.scale`
    #[arg(long)]
    scale: Option<usize>,
    /// `train.epochs`
    #[arg(long)]
    epochs: Option<usize>,
}

impl DataArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            test_dataset: self.test_dataset.clone(),
            ..Overrides::default()
        }
    }
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            theta: self.theta,
            th: self.th,
            window_mode: self.window_mode.map(|w| match w {
                WindowArg::Dilated => WindowMode::Dilated,
                WindowArg::NonDilated => WindowMode::NonDilated,
            }),
            ms_mode: self.ms_mode.map(|m| match m {
                MsArg::Activate => MsMode::Activate,
                MsArg::Passthrough => MsMode::Passthrough,
            }),
            seed: self.seed,
            scale: self.scale,
            epochs: self.epochs,
            ..self.data.overrides()
        }
    }

    fn config(&self) -> Result<config::Config, Failure> {
        let mut cfg = match &self.config {
            Some(p) => config::Config::load(p)?,
            None => config::Config::default(),
        };
        self.overrides().apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { run, out } => commands::train(&run.config()?, &out),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => commands::eval(&checkpoint, &data.overrides(), out.as_deref()),
        Command::AnalyzeEnergy {
            from_counts,
            checkpoint,
            trace,
            network,
            data,
            out,
        } => {
            let source = match (from_counts, checkpoint, trace.zip(network)) {
                (Some(c), _, _) => commands::EnergySource::Counts(c[0], c[1]),
                (_, Some(p), _) => commands::EnergySource::Checkpoint(p, data.overrides()),
                (_, _, Some((t, n))) => commands::EnergySource::Trace(t, n),
                _ => return Err(Failure::Config(
                    "analyze-energy needs --from-counts, --checkpoint or --trace with --network"
                        .into(),
                )),
            };
            commands::analyze_energy(source, out.as_deref())
        }
        Command::SweepTheta {
            run,
            thetas,
            train_smoke,
            out,
        } => {
            let mut cfg = run.config()?;
            if let Some(list) = thetas {
                cfg.fusion.thetas = parse_thetas(&list)?;
                cfg.validate()?;
            }
            commands::sweep_theta(&cfg, train_smoke, out.as_deref())
        }
        Command::ExportReport { run, out } => commands::export_report(&run, out.as_deref()),
    }
}

fn parse_thetas(list: &str) -> Result<Vec<f64>, Failure> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Failure::Config(format!("--thetas: cannot parse {s:?}")))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wsnn: {e}");
            ExitCode::from(e.code())
        }
    }
}
