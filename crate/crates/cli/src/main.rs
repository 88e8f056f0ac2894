//! `noduleclip`: synthesize, preprocess, train, infer, zero-shot query and
//! evaluate from one binary.
//!
//! Exit codes: 0 on success, 1 on invalid configuration or missing
//! prerequisites, 2 on runtime failure.

mod commands;
mod config;
mod failure;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, InferArgs, PreprocessArgs, SynthArgs, TrainArgs, ZeroShotArgs};
use config::RunConfig;
use failure::{Classify, Outcome};

#[derive(Parser, Debug)]
#[command(name = "noduleclip", version, about = "Lung nodule malignancy risk from CT and semantic features")]
struct Cli {
    /// TOML run configuration. Flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed. Falls back to the config, then NODULECLIP_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with volumes, semantics and labels.
    Synth(SynthArgs),
    /// Cache model-ready view stacks and rendered reports per nodule.
    Preprocess(PreprocessArgs),
    /// Patient-level k-fold training with one checkpoint per fold.
    Train(TrainArgs),
    /// Score nodules with every fold and write calibrated patient risks.
    Infer(InferArgs),
    /// Semantic-feature probabilities from text prompts.
    Zeroshot(ZeroShotArgs),
    /// AUROC, AUPRC, bootstrap intervals and operating points.
    Evaluate(EvaluateArgs),
}

fn run(cli: Cli) -> Outcome<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path).invalid()?,
        None => RunConfig::default(),
    };
    let seed = config.resolve_seed(cli.seed).invalid()?;
    match &cli.command {
        Command::Synth(a) => commands::synth(config, seed, a),
        Command::Preprocess(a) => commands::preprocess(config, seed, a),
        Command::Train(a) => commands::train(config, seed, a),
        Command::Infer(a) => commands::infer(config, seed, a),
        Command::Zeroshot(a) => commands::zeroshot(config, seed, a),
        Command::Evaluate(a) => commands::evaluate(config, seed, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
