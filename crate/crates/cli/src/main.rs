//! `gdvae`: experiment harness for geometric dynamic VAEs. One JSON
//! config drives the whole pipeline — `generate` builds the dataset,
//! `train` runs seeded trials, `eval` produces the error table, and
//! `analyze` emits latent-space diagnostics. Identical config and seed
//! reproduce identical artifact bytes.

mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "gdvae", version, about = "Manifold-latent VAE experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent trials (default: GDVAE_THREADS or 1).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset described by the config.
    Generate(CommonArgs),
    /// Train one model per trial, each with a derived seed.
    Train(CommonArgs),
    /// Evaluate trained trials and configured baselines into an error table.
    Eval(CommonArgs),
    /// Emit latent-variance, continuity, and latent-code diagnostics.
    Analyze(CommonArgs),
}

fn run(cli: Cli) -> gdvae_core::Result<()> {
    let (name, args) = match &cli.command {
        Command::Generate(a) => ("generate", a),
        Command::Train(a) => ("train", a),
        Command::Eval(a) => ("eval", a),
        Command::Analyze(a) => ("analyze", a),
    };
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_overrides(args.out.clone(), args.trials, args.seed)?;
    let threads = commands::resolve_threads(args.threads);
    match name {
        "generate" => commands::cmd_generate(&cfg),
        "train" => commands::cmd_train(&cfg, threads),
        "eval" => commands::cmd_eval(&cfg),
        _ => commands::cmd_analyze(&cfg),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(commands::exit_code(&e));
    }
}
