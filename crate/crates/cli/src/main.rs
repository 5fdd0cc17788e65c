//! `jamdet`: command-line driver for the SSB jamming detector.
//!
//! Subcommands cover the whole pipeline: `gen` synthesizes labeled datasets,
//! `train` fits the two networks, `calibrate` places the decision
//! thresholds, `detect` classifies datasets or raw IQ captures, and `eval`
//! writes the metric reports. Every command is deterministic given its
//! configuration and seeds, never mutates its inputs, and exits 0 only on
//! full success.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, TrainArgs};
use config::load_settings;

#[derive(Parser)]
#[command(name = "jamdet", version, about = "Jamming detection for 5G synchronization signal blocks")]
struct Cli {
    /// Configuration file (`key = value` lines, dotted sections).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed override: the dataset master seed for `gen`, the training seed
    /// for `train`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: one per CPU core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset and its manifest
    Gen {
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Manifest CSV (default: `manifest.csv` beside the dataset).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Observations per class (overrides the config).
        #[arg(long)]
        obs_per_class: Option<usize>,
        /// DFT size (overrides the config).
        #[arg(long)]
        n_fft: Option<usize>,
    },
    /// Train the screening network, and the second stage with --cascade
    Train {
        /// Labeled dataset to train on.
        #[arg(long)]
        dataset: PathBuf,
        /// Output file for the first network.
        #[arg(long)]
        out: PathBuf,
        /// Also train the second network block-wise on the high-SJNR subset.
        #[arg(long)]
        cascade: bool,
        /// Output file for the second network.
        #[arg(long, required_if_eq("cascade", "true"))]
        model2_out: Option<PathBuf>,
        /// The second network trains on jammed observations at or above this
        /// SJNR (dB), plus an equal-size clean sample.
        #[arg(long, default_value_t = 10.0)]
        sjnr_cutoff: f64,
        /// Training epochs (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
        /// Training log CSV (default: `train_log.csv` beside the model).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Calibrate decision thresholds on a labeled dataset
    Calibrate {
        /// First-network model file.
        #[arg(long)]
        model1: PathBuf,
        /// Second-network model file.
        #[arg(long)]
        model2: PathBuf,
        /// Labeled calibration dataset (both classes).
        #[arg(long)]
        dataset: PathBuf,
        /// False-alarm target, strictly inside (0, 1).
        #[arg(long, default_value_t = 0.05, value_parser = parse_delta_fa)]
        delta_fa: f64,
        /// Output thresholds file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a dataset or a raw IQ capture
    Detect {
        /// Binary dataset, or an IQ CSV capture (`I,Q` per line) — told
        /// apart by the dataset magic.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model1: PathBuf,
        #[arg(long)]
        model2: PathBuf,
        /// Thresholds file written by `calibrate`.
        #[arg(long)]
        thresholds: PathBuf,
        /// Output decisions CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate verdicts: confusion matrix, operating curves, miss profile
    Eval {
        /// Labeled test dataset.
        #[arg(long)]
        dataset: PathBuf,
        /// Reuse verdicts from a decisions CSV instead of running the
        /// detector (writes confusion.csv and sjnr_miss.csv only).
        #[arg(long)]
        decisions: Option<PathBuf>,
        /// First-network model file (end-to-end mode).
        #[arg(long)]
        model1: Option<PathBuf>,
        /// Second-network model file (end-to-end mode).
        #[arg(long)]
        model2: Option<PathBuf>,
        /// Thresholds file (end-to-end mode).
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Labeled calibration dataset for the curve sweep (end-to-end mode).
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Directory receiving confusion.csv, roc.csv, sjnr_miss.csv.
        #[arg(long)]
        out_dir: PathBuf,
        /// SJNR bin edges in dB: comma list or start:step:stop.
        #[arg(long, default_value = "-10:10:30")]
        sjnr_bins: String,
        /// Number of false-alarm targets swept over [0.01, 0.5].
        #[arg(long, default_value_t = 20)]
        fa_points: usize,
    },
}

fn parse_delta_fa(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not strictly inside (0, 1)"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| format!("cannot configure {n} worker threads: {e}"))?;
    }
    match cli.command {
        Command::Gen { out, manifest, obs_per_class, n_fft } => {
            let mut settings = load_settings(cli.config.as_deref(), n_fft)?;
            if let Some(n) = obs_per_class {
                settings.scenario.n_obs_per_class = n;
            }
            if let Some(seed) = cli.seed {
                settings.scenario.master_seed = seed;
            }
            commands::cmd_gen(&settings, &out, manifest)
        }
        Command::Train { dataset, out, cascade, model2_out, sjnr_cutoff, epochs, log } => {
            let mut settings = load_settings(cli.config.as_deref(), None)?;
            if let Some(e) = epochs {
                settings.train.max_epochs = e;
            }
            if let Some(seed) = cli.seed {
                settings.train.seed = seed;
            }
            commands::cmd_train(
                &settings,
                &TrainArgs { dataset, out, cascade, model2_out, sjnr_cutoff, log },
            )
        }
        Command::Calibrate { model1, model2, dataset, delta_fa, out } => {
            commands::cmd_calibrate(&model1, &model2, &dataset, delta_fa, &out)
        }
        Command::Detect { input, model1, model2, thresholds, out } => {
            let settings = load_settings(cli.config.as_deref(), None)?;
            commands::cmd_detect(&settings, &input, &model1, &model2, &thresholds, &out)
        }
        Command::Eval {
            dataset,
            decisions,
            model1,
            model2,
            thresholds,
            calibration,
            out_dir,
            sjnr_bins,
            fa_points,
        } => commands::cmd_eval(&EvalArgs {
            dataset,
            decisions,
            model1,
            model2,
            thresholds,
            calibration,
            out_dir,
            sjnr_bins,
            fa_points,
        }),
    }
}
