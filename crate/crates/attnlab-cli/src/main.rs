use attnlab_cli::commands::{execute, Command, RunContext};
use attnlab_cli::config::Config;
use attnlab_cli::CliError;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

/// Gradient-flow lab for multi-head softmax attention on multi-task
/// in-context linear regression.
#[derive(Debug, Parser)]
#[command(name = "attnlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (ATTNLAB_OUT takes precedence).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DynMode {
    Flow,
    Spectral,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Gradient-flow trajectory and phase report.
    Dynamics {
        #[arg(long, value_enum, default_value = "flow")]
        mode: DynMode,
    },
    /// Reduced spectral dynamics.
    Spectral,
    /// Softmax moment tables, regime curves and Stein checks.
    Moments,
    /// Water-filling solver and loss bounds.
    Optimal,
    /// Full flow against the spectral system.
    Compare,
    /// Nonlinear transfer and length generalization.
    Transfer,
    /// Quick invariant suite.
    Check,
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set thread count: {e}")))?;
    }
    let out = std::env::var_os("ATTNLAB_OUT").map(PathBuf::from).unwrap_or(cli.out);
    let cfg = cli.config.as_deref().map(Config::load).transpose()?;
    let cmd = match cli.command {
        Cmd::Dynamics { mode } => Command::Dynamics { spectral: mode == DynMode::Spectral },
        Cmd::Spectral => Command::Spectral,
        Cmd::Moments => Command::Moments,
        Cmd::Optimal => Command::Optimal,
        Cmd::Compare => Command::Compare,
        Cmd::Transfer => Command::Transfer,
        Cmd::Check => Command::Check,
    };
    let ctx = RunContext { out, seed: cli.seed, threads: cli.threads };
    let report = execute(cmd, cfg.as_ref(), &ctx)?;
    for l in &report.lines {
        println!("{l}");
    }
    match report.failure {
        Some(e) => Err(e),
        None => Ok(report.lines),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("attnlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
