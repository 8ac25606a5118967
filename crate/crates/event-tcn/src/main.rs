//! Thin subcommand front end over the library. All logic lives in
//! `event_tcn::cli`; this binary only parses arguments, applies flag
//! overrides to the run configuration, and maps errors to exit codes
//! (0 success, 1 usage or config error, 2 runtime or numeric failure).

use clap::{Args, Parser, Subcommand};
use event_tcn::config::RunConfig;
use event_tcn::error::Error;
use event_tcn::{cli, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "event-tcn",
    about = "Multi-receptive-field temporal convolutional event detection",
    long_about = "Train, evaluate and inspect multi-tower temporal 1D \
convolutional networks over precomputed feature sequences with \
second-resolution event annotations.\n\nConfiguration is a JSON document \
with sections: seed (root seed for every random consumer), synth \
(num_classes, feature_dim, duration_sec, events_per_class, \
pattern_durations, jitter_frames, noise_sigma, fps, split_fractions), \
network (towers, hidden_channels, input_len, average_head), sampler (p0, \
window_len, outputs, mode, shift_range_sec), train (lr, batch_size, \
iterations, class_weights, precision, eval_every), eval (delta_sec, \
postprocess, rare_classes) and spot (threshold, delta_grid). Unknown keys \
are rejected. Flags override file values."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed override; every random consumer derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test feature and annotation files.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector; writes checkpoint.ttck and loss_trace.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding <split>.fseq / <split>.events files.
        #[arg(long, default_value = "out")]
        data: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Tower list override, e.g. "t1,t2,t3" or "t2,t2,t2".
        #[arg(long)]
        towers: Option<String>,
        /// Iteration budget override.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Evaluate a checkpoint with tolerance-matched detection metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        data: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate on.
        #[arg(long, default_value = "test")]
        split: String,
        /// Matching tolerance in seconds.
        #[arg(long)]
        delta: Option<f64>,
        /// Disable duplicate merging and consecutive-run suppression.
        #[arg(long)]
        no_postprocess: bool,
    },
    /// Spot sparse events: watershed proposals and mAP over a grid.
    Spot {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Watershed probability threshold in (0,1).
        #[arg(long)]
        threshold: Option<f64>,
        /// Tolerance grid as start:end:step seconds.
        #[arg(long)]
        delta_grid: Option<String>,
    },
    /// Print per-tower conv arithmetic and receptive fields.
    Rf {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and compare tower combinations; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        data: PathBuf,
        /// Comma-separated arms, e.g. "t1,t2,t1+t2+t3".
        #[arg(long)]
        arms: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            cli::cmd_synth(&cfg, &common.out)
        }
        Command::Train {
            common,
            data,
            resume,
            towers,
            iterations,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(towers) = towers {
                cfg.network.towers = towers.split(',').map(|t| t.trim().to_string()).collect();
            }
            if let Some(iterations) = iterations {
                cfg.train.iterations = iterations;
            }
            cli::cmd_train(&cfg, &data, &common.out, resume.as_deref())
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            delta,
            no_postprocess,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(delta) = delta {
                cfg.eval.delta_sec = delta;
            }
            if no_postprocess {
                cfg.eval.postprocess = false;
            }
            cli::cmd_eval(&cfg, &checkpoint, &data, &common.out, &split)
        }
        Command::Spot {
            common,
            data,
            checkpoint,
            split,
            threshold,
            delta_grid,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(threshold) = threshold {
                cfg.spot.threshold = threshold;
            }
            if let Some(grid) = delta_grid {
                cfg.spot.delta_grid = grid;
            }
            cli::cmd_spot(&cfg, &checkpoint, &data, &common.out, &split)
        }
        Command::Rf { common } => {
            let cfg = load_config(&common)?;
            print!("{}", cli::cmd_rf(&cfg)?);
            Ok(())
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let (report, all_ok) = cli::cmd_gradcheck(cfg.seed)?;
            print!("{report}");
            if all_ok {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check failed".to_string()))
            }
        }
        Command::Ablate { common, data, arms } => {
            let cfg = load_config(&common)?;
            cli::cmd_ablate(&cfg, &data, &common.out, arms.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
