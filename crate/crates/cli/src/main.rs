//! `flowdistill` command-line entry point.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use flowdistill::distiller::Profile;

use crate::config::{resolve, Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "flowdistill",
    version,
    about = "Train and evaluate flow-free video stylizers"
)]
struct Cli {
    /// TOML run config; keys mirror the listing below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed tuple order and single-threaded kernels.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.weights.k=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic training and validation clips to disk.
    Synth,
    /// Train the flow-free baseline student.
    TrainBaseline {
        /// Add the temporal loss.
        #[arg(long)]
        temporal: bool,
    },
    /// Train the flow teacher and the flow-free teacher.
    TrainTeacher,
    /// Precompute teacher differences and baseline outputs.
    Cache,
    /// Distill the flow teacher into a frame-local student.
    Distill {
        /// Checkpoint name under `out/checkpoints`.
        #[arg(long, default_value = commands::DISTILLED)]
        name: String,
    },
    /// Stylize a frame directory, or a sequence directory with flows.
    Stylize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score checkpoints on the validation clips.
    EvalStability {
        /// `label=path` or a path; defaults to every checkpoint.
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Time single-frame inference.
    Bench {
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Summarize evaluations, benchmarks and distillation runs.
    Report,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    match s {
        "desk" => Ok(Profile::Desk),
        "paper" => Ok(Profile::Paper),
        _ => Err(format!("expected desk or paper, got {s}")),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg: RunConfig = resolve(&Overrides {
        config: cli.config,
        profile: cli.profile,
        seed: cli.seed,
        deterministic: cli.deterministic,
        out: cli.out,
        set: cli.set,
    })?;
    log::debug!("config fingerprint {}", cfg.fingerprint());
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::TrainBaseline { temporal } => commands::train_baseline_cmd(&cfg, temporal),
        Command::TrainTeacher => commands::train_teacher(&cfg),
        Command::Cache => commands::cache(&cfg),
        Command::Distill { name } => commands::distill_cmd(&cfg, &name),
        Command::Stylize {
            checkpoint,
            input,
            output,
        } => commands::stylize(&checkpoint, &input, &output),
        Command::EvalStability { models } => commands::eval_stability(&cfg, &models),
        Command::Bench { models } => commands::bench(&cfg, &models),
        Command::Report => commands::report(&cfg).map(|t| print!("{t}")),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command()
        .after_long_help(config::key_table())
        .get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
