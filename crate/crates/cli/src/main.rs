use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod io;

use config::RunConfig;

/// Event-camera pupil tracking pipeline.
#[derive(Debug, Parser)]
#[command(name = "evtrack", version)]
struct Cli {
    /// JSON file supplying defaults for every flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct SensorArgs {
    /// Sensor width in pixels.
    #[arg(long)]
    width: Option<u32>,
    /// Sensor height in pixels.
    #[arg(long)]
    height: Option<u32>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct GridArgs {
    #[command(flatten)]
    sensor: SensorArgs,
    /// Frame spacing in microseconds.
    #[arg(long)]
    dt_us: Option<u32>,
    /// Spatial downsample factor.
    #[arg(long)]
    downsample: Option<u32>,
    /// causal, symmetric or direct.
    #[arg(long)]
    mode: Option<String>,
    /// Centre time of the first frame; defaults to the first label, else the first event.
    #[arg(long)]
    t0_us: Option<u64>,
    /// Number of frames; defaults to enough to cover the input.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bin an event CSV into an EVT1 tensor.
    Bin {
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Reverse time and swap polarity channels after binning.
        #[arg(long)]
        flip: bool,
    },
    /// Apply a seeded spatial and temporal affine draw to events and labels.
    Augment {
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// JSON augmentation policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Segment index; selects an independent random stream.
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Skip sampling and apply the identity transform.
        #[arg(long)]
        identity: bool,
        /// Label spacing after temporal rescaling.
        #[arg(long)]
        label_period_us: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        sensor: SensorArgs,
    },
    /// Run a model over an event CSV and write pupil predictions.
    Infer {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
        /// One frame at a time through FIFO buffers (default).
        #[arg(long, conflicts_with = "offline")]
        streaming: bool,
        /// Whole segment in one pass.
        #[arg(long)]
        offline: bool,
        /// Emit every n-th frame.
        #[arg(long)]
        stride: Option<usize>,
        /// Only emit frames that share a timestamp with a label.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
        /// Predictions CSV; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-layer input sparsity, as JSON.
        #[arg(long)]
        profile_out: Option<PathBuf>,
        /// Segment loss against --labels, as JSON.
        #[arg(long, requires = "labels")]
        loss_out: Option<PathBuf>,
    },
    /// Score predictions against labels.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        sensor: SensorArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and MAC counts.
    Macs {
        /// Model directory; the run config's model is used otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Sparsity profile written by `infer --profile-out`.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded weights for a model configuration.
    InitWeights {
        /// JSON model configuration; the run config's model is used otherwise.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check streaming/offline equivalence and causality on real input.
    Verify {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
        /// Number of random cut times for the causality check.
        #[arg(long, default_value_t = 20)]
        cuts: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Centre the offline temporal window instead of right-aligning it.
        #[arg(long)]
        mutate_centered: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> error::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Bin {
            events,
            out,
            grid,
            flip,
        } => commands::bin(&cfg, events, &out, &grid, flip),
        Command::Augment {
            events,
            labels,
            policy,
            seed,
            index,
            identity,
            label_period_us,
            out_dir,
            sensor,
        } => commands::augment(
            &cfg,
            commands::AugmentArgs {
                events,
                labels,
                policy,
                seed,
                index,
                identity,
                label_period_us,
                out_dir,
                sensor,
            },
        ),
        Command::Infer {
            model,
            events,
            streaming: _,
            offline,
            stride,
            labels,
            grid,
            out,
            profile_out,
            loss_out,
        } => commands::infer(
            &cfg,
            commands::InferArgs {
                model,
                events,
                offline,
                stride,
                labels,
                grid,
                out,
                profile_out,
                loss_out,
            },
        ),
        Command::Eval {
            preds,
            labels,
            sensor,
            out,
        } => commands::eval(&cfg, &preds, labels, &sensor, out.as_deref()),
        Command::Macs { model, profile, out } => commands::macs(&cfg, model, profile, out.as_deref()),
        Command::InitWeights {
            model_config,
            seed,
            out_dir,
        } => commands::init_weights(&cfg, model_config, seed, &out_dir),
        Command::Verify {
            model,
            events,
            grid,
            cuts,
            seed,
            mutate_centered,
            out,
        } => commands::verify(
            &cfg,
            commands::VerifyArgs {
                model,
                events,
                grid,
                cuts,
                seed,
                mutate_centered,
                out,
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
