mod commands;
mod config;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cvdm_core::sampler::BetaMode;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cvdm", version, about = "Conditional variational diffusion models")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, overriding `paths.run`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate paired conditions and targets.
    GenerateData,
    /// Train schedule and denoiser jointly.
    Train {
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total number of training steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw posterior samples for the evaluation split.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of sampling steps.
        #[arg(long = "T")]
        steps: Option<usize>,
        /// `learned`, `ratio` or `linear:START:END`.
        #[arg(long)]
        beta_mode: Option<BetaMode>,
        /// Chains per condition.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Score predictions against the evaluation split.
    Eval {
        /// Directory with `<id>_mean.npy` (or `<id>_y.npy`) files; defaults to `<run>/samples`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Tabulate mean γ(t) and β(t) of a trained schedule for one condition.
    ScheduleReport {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Discrete-to-continuous loss convergence study.
    Convergence,
}

fn load_config(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(global.config.as_deref())?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.paths.run = out.clone();
    }
    cfg.resolve();
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenerateData => commands::generate_data(&cfg),
        Command::Train { checkpoint, steps } => {
            if let Some(s) = steps {
                cfg.train.iterations = s;
            }
            commands::train(&cfg, checkpoint.as_deref())
        }
        Command::Sample {
            checkpoint,
            steps,
            beta_mode,
            samples,
        } => {
            if let Some(t) = steps {
                cfg.sampler.steps = t;
            }
            if let Some(m) = beta_mode {
                cfg.sampler.beta_mode = m;
            }
            if let Some(n) = samples {
                cfg.sampler.n_samples = n;
            }
            commands::sample(&cfg, checkpoint.as_deref())
        }
        Command::Eval { predictions } => commands::eval(&cfg, predictions.as_deref()),
        Command::ScheduleReport { checkpoint } => commands::schedule_report(&cfg, checkpoint.as_deref()),
        Command::Convergence => commands::convergence(&cfg),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
