//! JSON run configuration.
//!
//! A config is a single JSON object. Unknown keys are rejected so typos do
//! not silently fall back to defaults.

use std::path::PathBuf;

use enkbf_core::enkbf::FilterKind;
use enkbf_core::matrix_kit::InverseStrategy;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required by every subcommand except `gain1d`.
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    /// Initial law `N(mean, cov)`; defaults to `N(0, I)`.
    #[serde(default)]
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub gain1d: Option<Gain1dConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", deny_unknown_fields)]
pub enum ScenarioConfig {
    #[serde(rename = "LIN1")]
    Lin1 {},
    #[serde(rename = "LIN2")]
    Lin2 {},
    #[serde(rename = "LINND")]
    LinNd {},
    #[serde(rename = "NONLIN_SIN")]
    NonlinSin {
        #[serde(default)]
        c_tilde: f64,
    },
    /// Time-invariant linear model given by its matrices (row-major lists).
    #[serde(rename = "custom")]
    Custom {
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        #[serde(default)]
        c_tilde: Option<Vec<Vec<f64>>>,
        h: Vec<Vec<f64>>,
        gamma: Vec<Vec<f64>>,
        /// Defaults to the spectral norm of `b`.
        #[serde(default)]
        lip_b: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_end: f64,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            t_end: 1.0,
            n_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    #[default]
    Deterministic,
    Classical,
    Transport,
}

impl VariantName {
    pub fn kind(self) -> FilterKind {
        match self {
            VariantName::Deterministic => FilterKind::DeterministicCorrelated,
            VariantName::Classical => FilterKind::Classical,
            VariantName::Transport => FilterKind::Transport,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InverseConfig {
    MoorePenrose {
        /// Defaults to `d_x · 1e-14`.
        #[serde(default)]
        rel_tol: Option<f64>,
    },
    Regularized {
        epsilon: f64,
        n: u32,
    },
}

impl InverseConfig {
    pub fn strategy(self, d_x: usize) -> InverseStrategy {
        match self {
            InverseConfig::MoorePenrose { rel_tol: None } => InverseStrategy::default_for_dim(d_x),
            InverseConfig::MoorePenrose { rel_tol: Some(rel_tol) } => InverseStrategy::MoorePenrose { rel_tol },
            InverseConfig::Regularized { epsilon, n } => InverseStrategy::Regularized { epsilon, n },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub variant: VariantName,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub inverse: Option<InverseConfig>,
}

fn default_m() -> usize {
    64
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            variant: VariantName::default(),
            m: default_m(),
            inverse: None,
        }
    }
}

impl FilterConfig {
    pub fn inverse_strategy(&self, d_x: usize) -> InverseStrategy {
        self.inverse
            .unwrap_or(InverseConfig::MoorePenrose { rel_tol: None })
            .strategy(d_x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
}

fn default_n_seeds() -> usize {
    1
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            base_seed: 0,
            n_seeds: default_n_seeds(),
        }
    }
}

impl SeedConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|s| self.base_seed.wrapping_add(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub dump_particles_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PocMode {
    /// Exact mean-field copies for linear models, surrogate otherwise.
    #[default]
    Auto,
    Exact,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub m_list: Vec<usize>,
    #[serde(default)]
    pub poc_mode: PocMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    Gaussian { mean: f64, var: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gain1dConfig {
    pub density: DensityConfig,
    pub x_min: f64,
    pub x_max: f64,
    pub n_pts: usize,
    /// Coefficients of `H(x) = Σ h_k x^k`; defaults to `H(x) = x`.
    #[serde(default = "default_h_poly")]
    pub h_poly: Vec<f64>,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default)]
    pub c_tilde: f64,
}

fn default_h_poly() -> Vec<f64> {
    vec![0.0, 1.0]
}

fn default_r() -> f64 {
    1.0
}

fn invalid(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite, got {v}")))
    }
}

fn check_matrix(name: &str, rows: &[Vec<f64>]) -> Result<()> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(invalid(format!("{name} must be a nonempty matrix")));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(invalid(format!("{name} has rows of different lengths")));
    }
    for v in rows.iter().flatten() {
        finite(name, *v)?;
    }
    Ok(())
}

impl RunConfig {
    /// Parses and validates a config; also returns the parsed JSON so it
    /// can be echoed verbatim into the manifest.
    pub fn from_json(text: &str) -> Result<(RunConfig, serde_json::Value)> {
        let echo: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        if !echo.is_object() {
            return Err(invalid("config must be a JSON object"));
        }
        let cfg: RunConfig = serde_json::from_value(echo.clone()).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok((cfg, echo))
    }

    /// Numeric checks that do not need the model. Dimension checks against
    /// the scenario happen when it is built.
    pub fn validate(&self) -> Result<()> {
        finite("grid.t_end", self.grid.t_end)?;
        if self.grid.t_end <= 0.0 || self.grid.n_steps == 0 {
            return Err(invalid(format!(
                "grid needs t_end > 0 and n_steps >= 1 (got {}, {})",
                self.grid.t_end, self.grid.n_steps
            )));
        }
        if self.filter.m < 2 {
            return Err(invalid(format!("filter.m must be at least 2, got {}", self.filter.m)));
        }
        if let Some(inv) = self.filter.inverse {
            inv.strategy(1).validate().map_err(|e| invalid(e.to_string()))?;
        }
        if self.seeds.n_seeds == 0 {
            return Err(invalid("seeds.n_seeds must be at least 1"));
        }
        if self.outputs.dump_particles_every == Some(0) {
            return Err(invalid("outputs.dump_particles_every must be positive"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.m_list.is_empty() || sweep.m_list.iter().any(|m| *m < 2) {
                return Err(invalid("sweep.m_list must be nonempty with every M >= 2"));
            }
        }
        if let Some(init) = &self.initial {
            init.mean.iter().try_for_each(|v| finite("initial.mean", *v))?;
            check_matrix("initial.cov", &init.cov)?;
        }
        match &self.scenario {
            Some(ScenarioConfig::NonlinSin { c_tilde }) => finite("scenario.c_tilde", *c_tilde)?,
            Some(ScenarioConfig::Custom {
                b,
                c,
                c_tilde,
                h,
                gamma,
                lip_b,
            }) => {
                for (name, m) in [("b", b), ("c", c), ("h", h), ("gamma", gamma)] {
                    check_matrix(name, m)?;
                }
                if let Some(ct) = c_tilde {
                    check_matrix("c_tilde", ct)?;
                }
                if let Some(l) = lip_b {
                    finite("lip_b", *l)?;
                    if *l < 0.0 {
                        return Err(invalid("lip_b must be nonnegative"));
                    }
                }
            }
            _ => {}
        }
        if let Some(g) = &self.gain1d {
            g.validate()?;
        }
        Ok(())
    }

    pub fn require_scenario(&self) -> Result<&ScenarioConfig> {
        self.scenario
            .as_ref()
            .ok_or_else(|| invalid("this subcommand needs a \"scenario\" entry"))
    }

    /// `sweep.m_list`, or `[filter.m]` when no sweep is configured.
    pub fn m_list(&self) -> Vec<usize> {
        self.sweep
            .as_ref()
            .map(|s| s.m_list.clone())
            .unwrap_or_else(|| vec![self.filter.m])
    }
}

impl Gain1dConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("x_min", self.x_min), ("x_max", self.x_max), ("r", self.r), ("c_tilde", self.c_tilde)] {
            finite(name, v)?;
        }
        if self.x_max <= self.x_min || self.n_pts < 3 {
            return Err(invalid("gain1d needs x_max > x_min and n_pts >= 3"));
        }
        if self.n_pts > 10_000_000 {
            return Err(invalid("gain1d.n_pts is too large"));
        }
        if self.r <= 0.0 {
            return Err(invalid("gain1d.r must be positive"));
        }
        if self.h_poly.is_empty() {
            return Err(invalid("gain1d.h_poly must have at least one coefficient"));
        }
        self.h_poly.iter().try_for_each(|v| finite("gain1d.h_poly", *v))?;
        match &self.density {
            DensityConfig::Gaussian { mean, var } => {
                finite("density.mean", *mean)?;
                if !(*var > 0.0 && var.is_finite()) {
                    return Err(invalid("density.var must be positive"));
                }
            }
            DensityConfig::Mixture { components } => {
                if components.is_empty() {
                    return Err(invalid("mixture needs at least one component"));
                }
                for c in components {
                    finite("component.mean", c.mean)?;
                    if !(c.weight > 0.0 && c.weight.is_finite() && c.var > 0.0 && c.var.is_finite()) {
                        return Err(invalid("mixture weights and variances must be positive"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn h(&self, x: f64) -> f64 {
        self.h_poly.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn density_fn(&self) -> impl Fn(f64) -> f64 + '_ {
        move |x| match &self.density {
            DensityConfig::Gaussian { mean, var } => (-(x - mean).powi(2) / (2.0 * var)).exp(),
            DensityConfig::Mixture { components } => components
                .iter()
                .map(|c| c.weight / c.var.sqrt() * (-(x - c.mean).powi(2) / (2.0 * c.var)).exp())
                .sum(),
        }
    }
}
