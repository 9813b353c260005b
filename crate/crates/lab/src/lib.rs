//! Experiment harness around `enkbf-core`: JSON configs, built-in scenarios,
//! one runner per subcommand and a manifest next to every set of outputs.

pub mod config;
pub mod error;
pub mod experiments;
pub mod fuzzing;
pub mod scenario;

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

pub use config::RunConfig;
pub use error::{LabError, Result};
pub use experiments::Outcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Kb,
    Filter,
    Consistency,
    Poc,
    Gain1d,
    Bounds,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Kb => "kb",
            Command::Filter => "filter",
            Command::Consistency => "consistency",
            Command::Poc => "poc",
            Command::Gain1d => "gain1d",
            Command::Bounds => "bounds",
        }
    }
}

/// Runs `cmd`, writes its CSVs and `manifest.json` into `out_dir`.
///
/// In strict mode a run with bound violations still writes all of its
/// outputs and then fails with [`LabError::Strict`].
pub fn execute(cmd: Command, cfg: &RunConfig, echo: &Value, out_dir: &Path) -> Result<Outcome> {
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir.display().to_string(), e))?;
    let outcome = match cmd {
        Command::Simulate => experiments::simulate(cfg, out_dir),
        Command::Kb => experiments::kb(cfg, out_dir),
        Command::Filter => experiments::filter(cfg, out_dir),
        Command::Consistency => experiments::consistency(cfg, out_dir),
        Command::Poc => experiments::poc(cfg, out_dir),
        Command::Gain1d => experiments::gain1d(cfg, out_dir),
        Command::Bounds => experiments::bounds(cfg, out_dir),
    }?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cmd.as_str(),
        "config": echo,
        "seed": cfg.seeds.base_seed,
        "n_seeds": cfg.seeds.n_seeds,
        "strict": cfg.strict,
        "grid": {
            "t_end": cfg.grid.t_end,
            "n_steps": cfg.grid.n_steps,
            "dt": cfg.grid.t_end / cfg.grid.n_steps as f64,
        },
        "outputs": outcome.files,
        "report": outcome.report,
    });
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest is plain JSON");
    fs::write(&path, text + "\n").map_err(|e| LabError::io(path.display().to_string(), e))?;
    log::info!("{} wrote {} file(s) to {}", cmd.as_str(), outcome.files.len() + 1, out_dir.display());
    if cfg.strict && outcome.violations > 0 {
        return Err(LabError::Strict(outcome.violations));
    }
    Ok(outcome)
}
