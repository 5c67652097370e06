use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mflab_core::harness::{self, ExperimentConfig, ExperimentKind};
use mflab_core::model::{GradScaling, NoiseConvention};

#[derive(Parser)]
#[command(name = "mflab", version, about = "Scaled mean-field two-layer network simulator and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one ensemble and compare loss and KL with the convergence bounds.
    Train(RunArgs),
    /// Sweep the output scale and fit log-log slopes.
    Sweep(RunArgs),
    /// Teacher-student runs over a grid of sample sizes.
    Generalize(RunArgs),
    /// Inequality and calibration audits.
    Audit(RunArgs),
    /// Evaluate every constant and bound for the configuration.
    Bounds(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out_dir` from the config, then `mflab-out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["meanfield", "raw"])]
    grad_scaling: Option<String>,
    /// Treat `√(2η)` in the noise law as a variance rather than a standard deviation.
    #[arg(long)]
    noise_variance_literal: bool,
}

fn run(kind: ExperimentKind, args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    // The subcommand decides what runs; the file's `experiment` key only
    // selects defaults.
    cfg.experiment = kind;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &args.grad_scaling {
        cfg.model.grad_scaling = s.parse::<GradScaling>()?;
    }
    if args.noise_variance_literal {
        cfg.model.noise = NoiseConvention::LiteralVariance;
    }
    cfg.validate()?;
    let out = args.out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("mflab-out"));
    let written = harness::execute(&cfg, &out).with_context(|| format!("{} failed", kind.name()))?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::Sweep(a) => (ExperimentKind::Sweep, a),
        Command::Generalize(a) => (ExperimentKind::Generalize, a),
        Command::Audit(a) => (ExperimentKind::Audit, a),
        Command::Bounds(a) => (ExperimentKind::Bounds, a),
    };
    match run(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
