//! Synchronous coupling between an EnKBF ensemble and independent copies of
//! the linear-Gaussian mean-field filter.
//!
//! Copy `i` starts from the same initial draw as particle `i` and consumes the
//! same `ΔWⁱ`, `ΔVⁱ` and `ΔY`. The only difference is that the copies use the
//! exact Kalman–Bucy moments `m̄_t`, `P̄_t` where the ensemble uses its
//! empirical ones, so `rⁱ = Xⁱ − X̄ⁱ` isolates the interaction error.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::enkbf::{enkbf_step, EnsembleState, EnsembleSummary, FilterKind, FilterVariant};
use crate::error::{Error, Result};
use crate::kalman_bucy::{integrate_moments, GaussianBelief};
use crate::matrix_kit::{InverseStrategy, SpsdMatrix};
use crate::model::{gamma_bar_m, LinearModelSpec, ModelSpec};
use crate::noise::{EnsembleNoise, ParticleNoise};
use crate::sde_sim::{simulate_truth_and_obs, InitialCondition, ObservationRecord, TimeGrid};

/// Relative eigenvalue threshold below which `P̄` counts as singular.
pub const MF_INVERTIBILITY_TOL: f64 = 1e-12;

fn broadcast(v: &DVector<f64>, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), m, |i, _| v[i])
}

/// One Euler step of the mean-field copies using the exact belief.
///
/// `P̄⁻¹` is only formed when `C̃ ≠ 0`; a (numerically) singular `P̄` then
/// aborts with a numerical failure.
pub fn mf_copy_step(
    model: &LinearModelSpec,
    particles: &DMatrix<f64>,
    belief: &GaussianBelief,
    dy: &DVector<f64>,
    dt: f64,
    noise: &ParticleNoise,
    step: usize,
) -> Result<DMatrix<f64>> {
    let m = particles.ncols();
    let d_x = model.d_x();
    if particles.nrows() != d_x {
        return Err(Error::dim("mean-field particles", d_x, particles.nrows()));
    }
    if belief.mean.len() != d_x || belief.cov.dim() != d_x {
        return Err(Error::dim("belief", d_x, belief.mean.len()));
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
    let t = belief.t;
    let x = particles;
    let p = belief.cov.as_matrix();
    let mbar = broadcast(&belief.mean, m);
    let h = model.obs_h(t);
    let r_inv = model.r_inverse(t)?;
    let dy_b = broadcast(dy, m);

    // same operation order as the ensemble step, so that zero-gain models
    // reproduce the ensemble bit for bit
    let mut dx = model.drift_ensemble(t, x) * dt;
    dx += model.diffusion_ensemble(t, x, &noise.dw);
    dx += model.c_tilde(t) * &noise.dv;
    let ct = model.c_tilde_gain(t);
    let gain = (p * h.transpose() + &ct) * &r_inv;
    let innovation = &dy_b - &h * (x + &mbar) * (0.5 * dt);
    dx += &gain * innovation;
    if model.has_correlated_noise(t) {
        let p_inv = exact_inverse(&belief.cov, step)?;
        let correction = &gain * ct.transpose() * p_inv;
        dx -= correction * (x - &mbar) * (0.5 * dt);
    }
    let next = x + dx;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Explosion { step });
    }
    Ok(next)
}

fn exact_inverse(p: &SpsdMatrix, step: usize) -> Result<DMatrix<f64>> {
    let lmin = p.lambda_min();
    let lmax = p.lambda_max();
    if !(lmin > MF_INVERTIBILITY_TOL * lmax.max(1.0)) {
        return Err(Error::NumericalFailure {
            step,
            reason: format!("mean-field covariance is not invertible (λ_min = {lmin:e})"),
        });
    }
    p.as_matrix()
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NumericalFailure {
            step,
            reason: "Cholesky factorization of the mean-field covariance failed".into(),
        })
}

/// `(1/M) Σ_i |Xⁱ − X̄ⁱ|²`.
pub fn poc_error(ensemble: &DMatrix<f64>, mf: &DMatrix<f64>) -> Result<f64> {
    if ensemble.shape() != mf.shape() {
        return Err(Error::dim(
            "poc_error particles",
            format!("{:?}", ensemble.shape()),
            format!("{:?}", mf.shape()),
        ));
    }
    if ensemble.ncols() == 0 {
        return Err(Error::InsufficientEnsemble { m: 0 });
    }
    Ok((ensemble - mf).norm_squared() / ensemble.ncols() as f64)
}

#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub ensemble: Vec<EnsembleSummary>,
    pub final_ensemble: DMatrix<f64>,
    pub final_mf: DMatrix<f64>,
    /// `(1/M) Σ |rⁱ|²` on every grid point.
    pub error_series: Vec<f64>,
}

impl CoupledRun {
    pub fn terminal_error(&self) -> f64 {
        *self.error_series.last().unwrap_or(&0.0)
    }

    pub fn sup_error(&self) -> f64 {
        self.error_series.iter().cloned().fold(0.0, f64::max)
    }
}

/// Runs the correlated deterministic EnKBF and `M` mean-field copies in
/// lockstep along `obs`.
///
/// `beliefs` must be the exact moments on the grid of `obs`, as returned by
/// [`integrate_moments`].
pub fn coupled_run(
    model: &LinearModelSpec,
    obs: &ObservationRecord,
    beliefs: &[GaussianBelief],
    init: &InitialCondition,
    m: usize,
    inverse: InverseStrategy,
    seed: u64,
) -> Result<CoupledRun> {
    let variant = FilterVariant::new(FilterKind::DeterministicCorrelated, inverse)?;
    crate::enkbf::validate_run(model, obs, m, &variant)?;
    let grid = obs.grid;
    if beliefs.len() != grid.n_steps() + 1 {
        return Err(Error::dim("belief series", grid.n_steps() + 1, beliefs.len()));
    }
    if init.dim() != model.d_x() {
        return Err(Error::dim("initial condition", model.d_x(), init.dim()));
    }
    let particles0 = init.sample_ensemble(seed, m);
    let mut state = EnsembleState::new(0.0, particles0.clone())?;
    let mut mf = particles0;
    let mut noise = EnsembleNoise::new(seed, m, model.d_w(), model.d_v());
    let dt = grid.dt();
    let mut summaries = Vec::with_capacity(grid.n_steps() + 1);
    let mut errors = Vec::with_capacity(grid.n_steps() + 1);
    for k in 0..=grid.n_steps() {
        state.t = grid.time(k);
        summaries.push(state.summary());
        errors.push(poc_error(state.particles(), &mf)?);
        if k == grid.n_steps() {
            break;
        }
        let step_noise = noise.draw(dt);
        let dy = obs.dy(k);
        let mut belief = beliefs[k].clone();
        belief.t = state.t;
        mf = mf_copy_step(model, &mf, &belief, &dy, dt, &step_noise, k)?;
        state = enkbf_step(model, &state, &dy, dt, &step_noise, &variant, k)?;
    }
    Ok(CoupledRun {
        ensemble: summaries,
        final_ensemble: state.particles().clone(),
        final_mf: mf,
        error_series: errors,
    })
}

/// One row of a propagation-of-chaos table.
#[derive(Debug, Clone, PartialEq)]
pub struct PocRow {
    pub m: usize,
    pub mean_err_t: f64,
    pub stderr_t: f64,
    pub mean_sup_err: f64,
    pub stderr_sup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PocSweepConfig {
    pub m_list: Vec<usize>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub inverse: InverseStrategy,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn validate_sweep(model: &ModelSpec, cfg: &PocSweepConfig, grid: &TimeGrid) -> Result<()> {
    if cfg.m_list.is_empty() || cfg.n_seeds == 0 {
        return Err(Error::Validation("sweep needs a nonempty M list and at least one seed".into()));
    }
    cfg.inverse.validate()?;
    for &m in &cfg.m_list {
        if m < 2 {
            return Err(Error::InsufficientEnsemble { m });
        }
        let gbar = gamma_bar_m(model, m, grid)?;
        if gbar <= 0.0 {
            log::warn!("γ̲^M = {gbar} ≤ 0 for M = {m}");
        }
    }
    Ok(())
}

fn tabulate(m_list: &[usize], per_seed: &[Vec<(f64, f64)>]) -> Vec<PocRow> {
    m_list
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let term: Vec<f64> = per_seed.iter().map(|s| s[j].0).collect();
            let sup: Vec<f64> = per_seed.iter().map(|s| s[j].1).collect();
            let (mean_err_t, stderr_t) = mean_and_stderr(&term);
            let (mean_sup_err, stderr_sup) = mean_and_stderr(&sup);
            PocRow {
                m,
                mean_err_t,
                stderr_t,
                mean_sup_err,
                stderr_sup,
            }
        })
        .collect()
}

/// Propagation-of-chaos sweep on a linear-Gaussian model.
///
/// Seed `s` uses `base_seed + s` for both the truth and the particles; the
/// truth and the exact moments are shared by every `M` of that seed. Seeds
/// run in parallel and are reduced in order.
pub fn poc_sweep(
    model: &LinearModelSpec,
    init: &InitialCondition,
    grid: &TimeGrid,
    cfg: &PocSweepConfig,
) -> Result<Vec<PocRow>> {
    validate_sweep(model, cfg, grid)?;
    let belief0 = GaussianBelief::new(0.0, init.mean().clone(), init.cov())?;
    let per_seed: Vec<Vec<(f64, f64)>> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| {
            let seed = cfg.base_seed.wrapping_add(s as u64);
            let obs = simulate_truth_and_obs(model, grid, init, seed)?;
            let beliefs = integrate_moments(model, &obs, &belief0, FilterKind::DeterministicCorrelated)?;
            cfg.m_list
                .iter()
                .map(|&m| {
                    let run = coupled_run(model, &obs, &beliefs, init, m, cfg.inverse, seed)?;
                    Ok((run.terminal_error(), run.sup_error()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tabulate(&cfg.m_list, &per_seed))
}

/// Surrogate sweep for models without an exact mean-field law.
///
/// The reference is the same filter with `M_ref = 8 · max(M)` particles.
/// Particle `i` of every ensemble shares its initial draw and noise stream
/// with particle `i` of the reference, and the error compares the first `M`
/// reference particles with the `M`-ensemble. This measures self-convergence
/// of the particle system, not distance to the mean-field limit.
pub fn surrogate_poc_sweep(
    model: &ModelSpec,
    init: &InitialCondition,
    grid: &TimeGrid,
    variant: &FilterVariant,
    cfg: &PocSweepConfig,
) -> Result<Vec<PocRow>> {
    validate_sweep(model, cfg, grid)?;
    let m_ref = 8 * cfg.m_list.iter().copied().max().unwrap_or(2);
    let per_seed: Vec<Vec<(f64, f64)>> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| {
            let seed = cfg.base_seed.wrapping_add(s as u64);
            let obs = simulate_truth_and_obs(model, grid, init, seed)?;
            crate::enkbf::validate_run(model, &obs, m_ref, variant)?;
            let dt = grid.dt();
            let mut reference = EnsembleState::new(0.0, init.sample_ensemble(seed, m_ref))?;
            let mut ref_noise = EnsembleNoise::new(seed, m_ref, model.d_w(), model.d_v());
            let mut states: Vec<EnsembleState> = cfg
                .m_list
                .iter()
                .map(|&m| EnsembleState::new(0.0, init.sample_ensemble(seed, m)))
                .collect::<Result<_>>()?;
            let mut noises: Vec<EnsembleNoise> = cfg
                .m_list
                .iter()
                .map(|&m| EnsembleNoise::new(seed, m, model.d_w(), model.d_v()))
                .collect();
            let mut acc = vec![(0.0_f64, 0.0_f64); cfg.m_list.len()];
            for k in 0..=grid.n_steps() {
                for (j, st) in states.iter().enumerate() {
                    let m = st.ensemble_size();
                    let head = reference.particles().columns(0, m).into_owned();
                    let err = poc_error(st.particles(), &head)?;
                    acc[j] = (err, acc[j].1.max(err));
                }
                if k == grid.n_steps() {
                    break;
                }
                let dy = obs.dy(k);
                let rn = ref_noise.draw(dt);
                reference = enkbf_step(model, &reference, &dy, dt, &rn, variant, k)?;
                for (st, nz) in states.iter_mut().zip(noises.iter_mut()) {
                    let pn = nz.draw(dt);
                    *st = enkbf_step(model, st, &dy, dt, &pn, variant, k)?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tabulate(&cfg.m_list, &per_seed))
}

/// Writes `M, mean_err_T, stderr_T, mean_sup_err, stderr_sup`.
pub fn write_poc_csv<W: Write>(rows: &[PocRow], writer: W) -> Result<()> {
    let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["M", "mean_err_T", "stderr_T", "mean_sup_err", "stderr_sup"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.m.to_string(),
            r.mean_err_t.to_string(),
            r.stderr_t.to_string(),
            r.mean_sup_err.to_string(),
            r.stderr_sup.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
    Ok(())
}
