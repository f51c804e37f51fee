//! `graybox`: dataset generation, model training, prediction, evaluation and
//! control synthesis for the simulated waveguide chip.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graybox_core::dataset::Split;
use graybox_core::simulator::Mode;

use commands::PredictInput;
use config::{FlagOverrides, Scale};
use failure::{Failure, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "graybox", version, about)]
struct Cli {
    /// Run configuration TOML layered over the --scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for datasets, checkpoints and CSVs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    scale: Scale,
    /// Measurement mode for new datasets: classical or quantum.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the chip on random pulse trains and write train/test sets.
    GenDataset,
    /// Fit the static parameters, then the recurrent model.
    Train {
        /// Continue stage 2 from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Per-layer traces of the trained model on one voltage sequence.
    Predict {
        /// Index into the dataset split.
        #[arg(long, conflicts_with = "voltages")]
        example: Option<usize>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// CSV with a time_ms column followed by one column per electrode.
        #[arg(long)]
        voltages: Option<PathBuf>,
    },
    /// Synthesize voltages for a target schedule and verify them on the simulator.
    Control {
        /// Target schedule TOML; overrides the configured one.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Train and test MSE of the checkpoint.
    Eval,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: graybox_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split '{s}'")),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let flags = FlagOverrides {
        out: cli.out,
        seed: cli.seed,
        workers: cli.workers,
        mode: cli.mode,
    };
    let mut cfg = config::load(cli.scale, cli.config.as_deref(), std::env::vars(), &flags)?;
    if let Command::Control {
        schedule: Some(p), ..
    } = &cli.command
    {
        if !p.is_file() {
            return Err(Failure::config(format!(
                "schedule file {} not found",
                p.display()
            )));
        }
        cfg.controller.schedule = Some(p.clone());
    }
    if let Some(w) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    match cli.command {
        Command::GenDataset => commands::gen_dataset(&cfg),
        Command::Train { resume } => commands::train(&cfg, resume),
        Command::Predict {
            example,
            split,
            voltages,
        } => {
            let input = match (example, voltages) {
                (_, Some(p)) => PredictInput::Voltages(p),
                (Some(index), None) => PredictInput::Example { split, index },
                (None, None) => PredictInput::Example { split, index: 0 },
            };
            commands::predict(&cfg, &input)
        }
        Command::Control { .. } => commands::control(&cfg),
        Command::Eval => commands::eval(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
