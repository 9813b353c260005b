//! Ensemble Kalman–Bucy filters driven by one realized observation stream.
//!
//! Three particle systems are provided:
//!
//! - [`FilterKind::DeterministicCorrelated`]: the correlated-noise
//!   deterministic EnKBF with the `(P^M Hᵀ + C̃) R⁻¹` gain and the
//!   `C̃ᵀ (P^M)⁺` correction.
//! - [`FilterKind::Classical`]: perturbed observations `dY − H Xⁱ dt − Γ dVⁱ`.
//! - [`FilterKind::Transport`]: diffusion replaced by the drift
//!   `C Cᵀ (P^M)⁺ (Xⁱ − x^M) / 2`.
//!
//! Each step evaluates the ensemble moments once at the start of the step and
//! applies an explicit Euler update to every particle.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::diagnostics::DiagnosticSeries;
use crate::error::{Error, Result};
use crate::matrix_kit::{empirical_moments, moore_penrose, pseudo_inverse, InverseStrategy, SpsdMatrix};
use crate::model::{gamma_bar_m, ModelSpec};
use crate::noise::{EnsembleNoise, ParticleNoise};
use crate::sde_sim::{InitialCondition, ObservationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    DeterministicCorrelated,
    Classical,
    Transport,
}

impl FilterKind {
    pub fn requires_uncorrelated(&self) -> bool {
        !matches!(self, FilterKind::DeterministicCorrelated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterVariant {
    pub kind: FilterKind,
    pub inverse: InverseStrategy,
}

impl FilterVariant {
    pub fn new(kind: FilterKind, inverse: InverseStrategy) -> Result<Self> {
        inverse.validate()?;
        Ok(FilterVariant { kind, inverse })
    }
}

/// Particles at time `t` with their cached empirical moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub t: f64,
    particles: DMatrix<f64>,
    mean: DVector<f64>,
    cov: SpsdMatrix,
    pub singular_events: usize,
}

impl EnsembleState {
    pub fn new(t: f64, particles: DMatrix<f64>) -> Result<Self> {
        let (mean, cov) = empirical_moments(&particles)?;
        Ok(EnsembleState {
            t,
            particles,
            mean,
            cov,
            singular_events: 0,
        })
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SpsdMatrix {
        &self.cov
    }

    pub fn ensemble_size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn summary(&self) -> EnsembleSummary {
        EnsembleSummary {
            t: self.t,
            mean: self.mean.clone(),
            cov: self.cov.clone(),
            lambda_min: self.cov.lambda_min(),
            trace: self.cov.trace(),
            singular_events: self.singular_events,
        }
    }
}

/// Per-step record kept by [`run_filter`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: SpsdMatrix,
    pub lambda_min: f64,
    pub trace: f64,
    pub singular_events: usize,
}

/// `x̄ 1ᵀ` for `m` columns.
fn broadcast(v: &DVector<f64>, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), m, |i, _| v[i])
}

/// One Euler step of the chosen particle system.
///
/// `step` is only used to label errors.
pub fn enkbf_step(
    model: &ModelSpec,
    state: &EnsembleState,
    dy: &DVector<f64>,
    dt: f64,
    noise: &ParticleNoise,
    variant: &FilterVariant,
    step: usize,
) -> Result<EnsembleState> {
    let m = state.ensemble_size();
    let d_x = model.d_x();
    if !(dt > 0.0) {
        return Err(Error::Validation(format!("dt must be positive, got {dt}")));
    }
    if state.particles.nrows() != d_x {
        return Err(Error::dim("ensemble state", d_x, state.particles.nrows()));
    }
    if dy.len() != model.d_y() {
        return Err(Error::dim("observation increment", model.d_y(), dy.len()));
    }
    if noise.dw.shape() != (model.d_w(), m) || noise.dv.shape() != (model.d_v(), m) {
        return Err(Error::dim(
            "particle noise",
            format!("{}x{m} and {}x{m}", model.d_w(), model.d_v()),
            format!("{:?} and {:?}", noise.dw.shape(), noise.dv.shape()),
        ));
    }
    let t = state.t;
    let correlated = model.has_correlated_noise(t);
    if variant.kind.requires_uncorrelated() && correlated {
        return Err(Error::UnsupportedVariant(format!(
            "{:?} filter requires C̃ = 0",
            variant.kind
        )));
    }

    let x = &state.particles;
    let p = state.cov.as_matrix();
    let xbar = broadcast(&state.mean, m);
    let centered = x - &xbar;
    let h = model.obs_h(t);
    let r_inv = model.r_inverse(t)?;
    let dy_b = broadcast(dy, m);
    let mut singular = 0;

    // P⁺ evaluated once per step, only when it enters the update
    let mut pinv = || -> DMatrix<f64> {
        match variant.inverse {
            InverseStrategy::MoorePenrose { rel_tol } => {
                let pi = moore_penrose(&state.cov, rel_tol);
                if pi.rank_deficient {
                    singular += 1;
                    log::debug!("step {step}: ensemble covariance rank {} < {d_x}", pi.rank);
                }
                pi.matrix
            }
            strategy => pseudo_inverse(&state.cov, strategy),
        }
    };

    let mut dx = model.drift_ensemble(t, x) * dt;
    match variant.kind {
        FilterKind::DeterministicCorrelated => {
            dx += model.diffusion_ensemble(t, x, &noise.dw);
            dx += model.c_tilde(t) * &noise.dv;
            let ct = model.c_tilde_gain(t);
            let gain = (p * h.transpose() + &ct) * &r_inv;
            let innovation = &dy_b - &h * (x + &xbar) * (0.5 * dt);
            dx += &gain * innovation;
            if correlated {
                let correction = &gain * ct.transpose() * pinv();
                dx -= correction * &centered * (0.5 * dt);
            }
        }
        FilterKind::Classical => {
            dx += model.diffusion_ensemble(t, x, &noise.dw);
            let gain = p * h.transpose() * &r_inv;
            let innovation = &dy_b - &h * x * dt - model.obs_gamma(t) * &noise.dv;
            dx += gain * innovation;
        }
        FilterKind::Transport => {
            let gain = p * h.transpose() * &r_inv;
            let innovation = &dy_b - &h * (x + &xbar) * (0.5 * dt);
            dx += gain * innovation;
            match model.constant_diffusion(t) {
                Some(c) => {
                    if c.iter().any(|v| *v != 0.0) {
                        let spread = &c * c.transpose() * pinv();
                        dx += spread * &centered * (0.5 * dt);
                    }
                }
                None => {
                    let pi = pinv();
                    for i in 0..m {
                        let xi = x.column(i).into_owned();
                        let c = model.diffusion(t, &xi);
                        let push = &c * c.transpose() * &pi * centered.column(i) * (0.5 * dt);
                        let mut col = dx.column_mut(i);
                        col += push;
                    }
                }
            }
        }
    }

    let next = x + dx;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Explosion { step });
    }
    let mut out = EnsembleState::new(t + dt, next)?;
    out.singular_events = state.singular_events + singular;
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep a full particle snapshot every `k` steps (plus the final one).
    pub dump_particles_every: Option<usize>,
    /// Suppress the non-positive γ̲^M warning (for callers that report it once
    /// per batch themselves).
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct ParticleSnapshot {
    pub step: usize,
    pub t: f64,
    pub particles: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub summaries: Vec<EnsembleSummary>,
    pub diagnostics: DiagnosticSeries,
    pub final_state: EnsembleState,
    pub snapshots: Vec<ParticleSnapshot>,
}

/// Checks everything a filter run needs before stepping.
pub fn validate_run(model: &ModelSpec, obs: &ObservationRecord, m: usize, variant: &FilterVariant) -> Result<()> {
    if m < 2 {
        return Err(Error::InsufficientEnsemble { m });
    }
    variant.inverse.validate()?;
    model.validate_on_grid(&obs.grid)?;
    if obs.d_y() != model.d_y() {
        return Err(Error::dim("observation increments", model.d_y(), obs.d_y()));
    }
    if variant.kind.requires_uncorrelated() && obs.grid.times().any(|t| model.has_correlated_noise(t)) {
        return Err(Error::UnsupportedVariant(format!(
            "{:?} filter requires C̃ = 0",
            variant.kind
        )));
    }
    Ok(())
}

/// Runs the filter over the whole observation record.
///
/// The initial ensemble and the particle noise come from the per-particle
/// streams keyed by `seed`, disjoint from the truth streams.
pub fn run_filter(
    model: &ModelSpec,
    obs: &ObservationRecord,
    init: &InitialCondition,
    m: usize,
    variant: &FilterVariant,
    seed: u64,
    options: &RunOptions,
) -> Result<FilterRun> {
    validate_run(model, obs, m, variant)?;
    if init.dim() != model.d_x() {
        return Err(Error::dim("initial condition", model.d_x(), init.dim()));
    }
    let grid = obs.grid;
    let p0 = init.cov();
    let mut diagnostics = DiagnosticSeries::prepare(model, &grid, p0.trace(), p0.lambda_min(), Some(m))?;
    let gbar = gamma_bar_m(model, m, &grid)?;
    if gbar <= 0.0 && !options.quiet {
        log::warn!("γ̲^M = {gbar} ≤ 0 for M = {m}: well-posedness is not guaranteed, running anyway");
    }

    let mut noise = EnsembleNoise::new(seed, m, model.d_w(), model.d_v());
    let mut state = EnsembleState::new(0.0, init.sample_ensemble(seed, m))?;
    let dt = grid.dt();
    let mut summaries = Vec::with_capacity(grid.n_steps() + 1);
    let mut snapshots = Vec::new();
    let dump = options.dump_particles_every.filter(|k| *k > 0);

    for k in 0..=grid.n_steps() {
        state.t = grid.time(k);
        let summary = state.summary();
        diagnostics.record(summary.trace, summary.lambda_min);
        summaries.push(summary);
        if let Some(every) = dump {
            if k % every == 0 || k == grid.n_steps() {
                snapshots.push(ParticleSnapshot {
                    step: k,
                    t: state.t,
                    particles: state.particles.clone(),
                });
            }
        }
        if k == grid.n_steps() {
            break;
        }
        let step_noise = noise.draw(dt);
        state = enkbf_step(model, &state, &obs.dy(k), dt, &step_noise, variant, k)?;
    }
    diagnostics.singular_events = state.singular_events;
    Ok(FilterRun {
        summaries,
        diagnostics,
        final_state: state,
        snapshots,
    })
}

/// Writes `t, xbar_1.., p_11.. (row-major), lambda_min, trace, singular_events`.
pub fn write_summaries_csv<W: Write>(summaries: &[EnsembleSummary], writer: W) -> Result<()> {
    let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let d = summaries.first().map(|s| s.mean.len()).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("xbar_{i}")));
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("p_{i}{j}"));
        }
    }
    header.extend(["lambda_min", "trace", "singular_events"].map(String::from));
    w.write_record(&header).map_err(io)?;
    for s in summaries {
        let mut row = vec![s.t.to_string()];
        row.extend(s.mean.iter().map(|v| v.to_string()));
        let p = s.cov.as_matrix();
        for i in 0..d {
            for j in 0..d {
                row.push(p[(i, j)].to_string());
            }
        }
        row.push(s.lambda_min.to_string());
        row.push(s.trace.to_string());
        row.push(s.singular_events.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Writes `step, t, particle, x_1..x_d` for every snapshot.
pub fn write_snapshots_csv<W: Write>(snapshots: &[ParticleSnapshot], writer: W) -> Result<()> {
    let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let d = snapshots.first().map(|s| s.particles.nrows()).unwrap_or(0);
    let mut header = vec!["step".to_string(), "t".into(), "particle".into()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    w.write_record(&header).map_err(io)?;
    for snap in snapshots {
        for (i, col) in snap.particles.column_iter().enumerate() {
            let mut row = vec![snap.step.to_string(), snap.t.to_string(), i.to_string()];
            row.extend(col.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
    Ok(())
}
