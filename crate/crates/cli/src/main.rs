//! `denkf`: dataset generation, training, evaluation and force detection for
//! the learned ensemble Kalman filter.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use denkf_core::models::Variant;
use serde::Serialize;

use commands::{EvalRun, ForcesRun, Invocation, SimulateRun, TrainRun};
use config::{EvalSettings, ForcesSettings, SimulateSettings, TrainSettings};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "denkf", version, about = "Learned ensemble Kalman filtering for a soft robot arm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic D1..D10 recordings at each sampling rate.
    Simulate(SimulateArgs),
    /// Train the filter's networks on recordings in a data directory.
    Train(TrainArgs),
    /// Filter held-out recordings and report errors.
    Eval(EvalArgs),
    /// Inject observation biases and report the detection statistic.
    Forces(ForcesArgs),
    /// Re-execute a run from its manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Common {
    /// TOML settings file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, env = "DENKF_SEED")]
    seed: Option<u64>,
    /// Print the effective settings as TOML and exit.
    #[arg(long)]
    print_config: bool,
    /// Where to write the run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recording length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Sampling rates in Hz (comma separated).
    #[arg(long, value_delimiter = ',')]
    freq: Option<Vec<u32>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of recordings written by `simulate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path; rewritten after every epoch.
    #[arg(long)]
    out: Option<PathBuf>,
    /// fix, pe or pe+te.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Cap on training windows per epoch (0 uses all).
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    /// Dataset names to train on (comma separated).
    #[arg(long, value_delimiter = ',')]
    datasets: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    freq: Option<Vec<u32>>,
    /// Continue from the checkpoint at --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for the report, trajectories and force traces.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    datasets: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    freq: Option<Vec<u32>>,
    /// Cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Drop observations over one window of this fraction of each recording.
    #[arg(long)]
    missing_mask: Option<f64>,
    /// Write a force trace per recording.
    #[arg(long)]
    detect_forces: bool,
    #[arg(long)]
    ensemble_size: Option<usize>,
}

#[derive(Args)]
struct ForcesArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset name, for example D1.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    freq: Option<u32>,
    /// Bias sizes in raw-channel standard deviations (comma separated).
    #[arg(long, value_delimiter = ',')]
    magnitudes: Option<Vec<f64>>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Manifest of the run to repeat.
    manifest: PathBuf,
    /// Write the repeated outputs here instead of over the originals.
    #[arg(long)]
    into: Option<PathBuf>,
}

fn required(v: Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    v.ok_or_else(|| CliError::usage(format!("missing required flag --{flag}")))
}

fn beside(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Prints the settings and returns `None` under `--print-config`.
fn settings_or_print<T: Serialize>(common: &Common, s: T) -> CliResult<Option<T>> {
    if common.print_config {
        print!("{}", config::render(&s)?);
        return Ok(None);
    }
    Ok(Some(s))
}

fn resolve(cmd: Command) -> CliResult<Option<Invocation>> {
    Ok(match cmd {
        Command::Simulate(a) => {
            let mut s: SimulateSettings = config::load(a.common.config.as_deref())?;
            if let Some(v) = a.common.seed {
                s.seed = v;
            }
            if let Some(v) = a.duration {
                s.duration_s = v;
            }
            if let Some(v) = a.freq {
                s.frequencies = v;
            }
            let Some(settings) = settings_or_print(&a.common, s)? else {
                return Ok(None);
            };
            let out = required(a.out, "out")?;
            Some(Invocation::Simulate(SimulateRun {
                manifest: a.common.manifest.unwrap_or_else(|| out.join("manifest.json")),
                out,
                settings,
            }))
        }
        Command::Train(a) => {
            let mut s: TrainSettings = config::load(a.common.config.as_deref())?;
            if let Some(v) = a.common.seed {
                s.train.seed = v;
            }
            if let Some(v) = a.variant {
                s.variant = v;
            }
            if let Some(v) = a.epochs {
                s.train.epochs = v;
            }
            if let Some(v) = a.lr {
                s.train.lr = v;
            }
            if let Some(v) = a.samples_per_epoch {
                s.train.samples_per_epoch = v;
            }
            if let Some(v) = a.datasets {
                s.datasets = v;
            }
            if let Some(v) = a.freq {
                s.frequencies = v;
            }
            let Some(settings) = settings_or_print(&a.common, s)? else {
                return Ok(None);
            };
            let out = required(a.out, "out")?;
            Some(Invocation::Train(TrainRun {
                data: required(a.data, "data")?,
                manifest: a.common.manifest.unwrap_or_else(|| beside(&out, ".manifest.json")),
                out,
                resume: a.resume,
                settings,
            }))
        }
        Command::Eval(a) => {
            let mut s: EvalSettings = config::load(a.common.config.as_deref())?;
            if let Some(v) = a.common.seed {
                s.eval.filter.seed = v;
            }
            if let Some(v) = a.datasets {
                s.datasets = v;
            }
            if let Some(v) = a.freq {
                s.frequencies = v;
            }
            if let Some(v) = a.folds {
                s.folds = v;
            }
            if let Some(v) = a.missing_mask {
                s.missing_fraction = v;
            }
            if a.detect_forces {
                s.detect_forces = true;
            }
            if let Some(v) = a.ensemble_size {
                s.eval.filter.ensemble_size = v;
            }
            let Some(settings) = settings_or_print(&a.common, s)? else {
                return Ok(None);
            };
            let out = required(a.out, "out")?;
            Some(Invocation::Eval(EvalRun {
                checkpoint: required(a.checkpoint, "checkpoint")?,
                data: required(a.data, "data")?,
                manifest: a.common.manifest.unwrap_or_else(|| out.join("manifest.json")),
                out,
                settings,
            }))
        }
        Command::Forces(a) => {
            let mut s: ForcesSettings = config::load(a.common.config.as_deref())?;
            if let Some(v) = a.common.seed {
                s.eval.filter.seed = v;
            }
            if let Some(v) = a.dataset {
                s.dataset = v;
            }
            if let Some(v) = a.freq {
                s.frequency = v;
            }
            if let Some(v) = a.magnitudes {
                s.magnitudes = v;
            }
            let Some(settings) = settings_or_print(&a.common, s)? else {
                return Ok(None);
            };
            let out = required(a.out, "out")?;
            Some(Invocation::Forces(ForcesRun {
                checkpoint: required(a.checkpoint, "checkpoint")?,
                data: required(a.data, "data")?,
                manifest: a.common.manifest.unwrap_or_else(|| out.join("manifest.json")),
                out,
                settings,
            }))
        }
        Command::Replay(a) => {
            commands::replay(&a.manifest, a.into.as_deref())?;
            None
        }
    })
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(inv) = resolve(cli.command)? {
        inv.validate()?;
        inv.execute()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
