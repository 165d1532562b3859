use std::path::PathBuf;
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod layout;
mod report;

use commands::{AttackKind, Context};
use config::{ExperimentConfig, Overrides, DATA_ENV};
use layout::{ExitError, EXIT_USAGE};

/// Authorization control, fingerprints and watermarks for small classifiers.
#[derive(Debug, Parser)]
#[command(name = "modelguard", version)]
struct Cli {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use reference-scale epochs, fingerprint counts and forgery budget.
    #[arg(long, global = true)]
    full_fidelity: bool,
    /// Dataset directory holding the MNIST IDX files.
    #[arg(long, global = true, env = DATA_ENV)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the baseline classifier.
    Train,
    /// Train with the watermark (from scratch or on top of the baseline).
    Embed,
    /// Verify the watermark in a checkpoint; exits 1 on mismatch.
    Extract {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Generate and evaluate user fingerprints on the protected model.
    Genfp,
    /// Authenticate issued fingerprints and compare both inference paths.
    Auth,
    /// Run forgery, fine-tuning and pruning attacks.
    Attack {
        #[arg(long, value_enum, default_value = "all")]
        kind: AttackKind,
    },
    /// Assemble result tables from the per-command reports.
    Report,
    /// Print the resolved config.
    Config,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => ExperimentConfig::default(),
    };
    let cfg = base
        .resolve(&Overrides {
            seed: cli.seed,
            out: cli.out.clone(),
            full_fidelity: cli.full_fidelity,
            dataset: cli.data.clone(),
        })
        .map_err(|e| usage(format!("{e:#}")))?;
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let ctx = Context::new(&cfg)?;
    let started = SystemTime::now();
    let name = match &cli.command {
        Command::Train => "train",
        Command::Embed => "embed",
        Command::Extract { .. } => "extract",
        Command::Genfp => "genfp",
        Command::Auth => "auth",
        Command::Attack { .. } => "attack",
        Command::Report => "report",
        Command::Config => unreachable!(),
    };
    let result = match cli.command {
        Command::Train => commands::train_cmd(&ctx),
        Command::Embed => commands::embed_cmd(&ctx),
        Command::Extract { checkpoint, spec } => commands::extract_cmd(&ctx, checkpoint, spec),
        Command::Genfp => commands::genfp_cmd(&ctx),
        Command::Auth => commands::auth_cmd(&ctx),
        Command::Attack { kind } => commands::attack_cmd(&ctx, kind),
        Command::Report => commands::report_cmd(&ctx),
        Command::Config => unreachable!(),
    };
    ctx.layout.write_metadata(name, &cfg, started)?;
    result
}

fn usage(message: String) -> anyhow::Error {
    layout::fail(EXIT_USAGE, message)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<ExitError>() {
                Some(x) => ExitCode::from(x.code),
                None => ExitCode::from(4),
            }
        }
    }
}
