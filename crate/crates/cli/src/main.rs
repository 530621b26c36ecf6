mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, Resolved};
use crate::failure::Failure;

/// Parking-occupancy distillation: synthetic data, teacher ensemble,
/// pseudo-labels, student fine-tuning, evaluation and cost models.
#[derive(Parser)]
#[command(name = "pkdistill", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single run seed; replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; falls back to the config, then $PKDISTILL_WORKDIR.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Config override by dot path, e.g. experiment.tau=0.8. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic domain (or both configured domains).
    Synth {
        /// Generator spec (JSON).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Built-in spec: a or b.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the teacher ensemble on the source domain.
    TrainTeacher,
    /// Label the target's first n days with the ensemble.
    PseudoLabel,
    /// Pretrain the student on the source and fine-tune one per target angle.
    Finetune,
    /// Score teacher, un-tuned and fine-tuned students on the target test days.
    Evaluate,
    /// Fine-tuned accuracy over the configured range of n.
    SweepDays,
    /// Pseudo-label counts and accuracy over the configured thresholds.
    SweepThreshold,
    /// Upload bandwidth and per-spot latency models.
    Cost {
        /// Manifest whose first image is probed; defaults to the target.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Student to time; defaults to a freshly initialised one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare backprop gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "student")]
        arch: String,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = pkdistill_core::nn::gradcheck::DEFAULT_SAMPLES)]
        samples: usize,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let resolved = Resolved::load(
        cli.config.as_deref(),
        &Overrides {
            seed: cli.seed,
            workdir: cli.workdir.as_deref(),
            sets: &cli.set,
        },
    )?;
    let r = &resolved;
    match cli.command {
        Command::Synth { spec, preset, out } => commands::synth(r, spec.as_deref(), preset.as_deref(), out.as_deref()),
        Command::TrainTeacher => commands::train_teacher(r),
        Command::PseudoLabel => commands::pseudo_label(r),
        Command::Finetune => commands::finetune(r),
        Command::Evaluate => commands::evaluate(r),
        Command::SweepDays => commands::sweep(r, "sweep-days"),
        Command::SweepThreshold => commands::sweep(r, "sweep-threshold"),
        Command::Cost { manifest, checkpoint } => commands::cost(r, manifest.as_deref(), checkpoint.as_deref()),
        Command::Gradcheck { arch, eps, samples } => commands::gradcheck(r, &arch, eps, samples),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
