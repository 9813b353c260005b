use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use enkbf_lab::{execute, Command, LabError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "enkbf-lab", version, about = "Ensemble Kalman-Bucy filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args, Debug)]
struct Flags {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides outputs.dir; default "out").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides seeds.base_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for seed-parallel work.
    #[arg(long, env = "ENKBF_LAB_THREADS")]
    threads: Option<usize>,
    /// Exit with status 3 when a bound check fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Simulate truth paths and observation increments.
    Simulate(Flags),
    /// Kalman-Bucy mean and Riccati covariance along one observation path.
    Kb(Flags),
    /// Ensemble filter runs with covariance diagnostics.
    Filter(Flags),
    /// Ensemble covariance error against the Riccati solution over M.
    Consistency(Flags),
    /// Propagation-of-chaos sweep over M.
    Poc(Flags),
    /// One-dimensional gain fields for a gridded density.
    Gain1d(Flags),
    /// Trace bound, eigenvalue floor and well-posedness constants.
    Bounds(Flags),
}

fn run(cli: Cli) -> Result<(), LabError> {
    let (cmd, flags) = match cli.command {
        Sub::Simulate(f) => (Command::Simulate, f),
        Sub::Kb(f) => (Command::Kb, f),
        Sub::Filter(f) => (Command::Filter, f),
        Sub::Consistency(f) => (Command::Consistency, f),
        Sub::Poc(f) => (Command::Poc, f),
        Sub::Gain1d(f) => (Command::Gain1d, f),
        Sub::Bounds(f) => (Command::Bounds, f),
    };
    let text = std::fs::read_to_string(&flags.config)
        .map_err(|e| LabError::Io { path: flags.config.display().to_string(), source: e })?;
    let (mut cfg, echo) = RunConfig::from_json(&text)?;
    if let Some(seed) = flags.seed {
        cfg.seeds.base_seed = seed;
    }
    cfg.strict |= flags.strict;
    let out = flags
        .out
        .or_else(|| cfg.outputs.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    if flags.threads == Some(0) {
        return Err(LabError::Config("--threads must be positive".into()));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = flags.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| LabError::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| execute(cmd, &cfg, &echo, &out))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
