mod commands;
mod config;
mod failure;
mod tables;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::{CliResult, Failure, EXIT_FAILURE};

const THREADS_ENV: &str = "STAINALIGN_THREADS";

/// Multistain slide representation learning on patch-embedding bundles.
#[derive(Parser)]
#[command(name = "stainalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a field by dotted path, e.g. `train.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> CliResult<config::RunConfig> {
        config::resolve(self.config.as_deref(), &self.set, self.seed)
    }

    fn out(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| Failure::config("--out <DIR> is required"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bundle.
    Synth(Common),
    /// Pretrain an encoder on `paths.dataset`.
    Pretrain(Common),
    /// Export slide embeddings and attention weights for `paths.dataset`.
    Embed(Common),
    /// Few-shot and survival evaluation of exported embeddings.
    Eval(Common),
    /// Compare analytic and finite-difference gradients for every loss mode.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Negate the analytic gradient (negative control).
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("{THREADS_ENV}={raw:?}: expected a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))
}

fn run(cli: Cli) -> CliResult<bool> {
    configure_threads()?;
    match cli.command {
        Command::Synth(c) => commands::synth(&c.resolve()?, c.out()?).map(|_| true),
        Command::Pretrain(c) => commands::pretrain(&c.resolve()?, c.out()?).map(|_| true),
        Command::Embed(c) => commands::embed(&c.resolve()?, c.out()?).map(|_| true),
        Command::Eval(c) => commands::eval(&c.resolve()?, c.out()?).map(|_| true),
        Command::Gradcheck { common, inject_sign_flip } => {
            commands::gradcheck_all(&common.resolve()?, common.out.as_deref(), inject_sign_flip)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE as u8),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
