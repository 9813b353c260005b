//! Exact linear-Gaussian reference: the Kalman–Bucy mean SDE with correlated
//! noise and its covariance Riccati equation.
//!
//! The covariance is deterministic and advanced with classical RK4. The mean
//! is driven by the realized (nondifferentiable) observation path and uses an
//! explicit Euler step with the start-of-step covariance.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::enkbf::FilterKind;
use crate::error::{Error, Result};
use crate::matrix_kit::{eig_sym, symmetrize, SpsdMatrix, PSD_TOL};
use crate::model::LinearModelSpec;
use crate::sde_sim::{ObservationRecord, TimeGrid};

/// Mean `m̄_t` and covariance `P̄_t` of the Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: SpsdMatrix,
}

impl GaussianBelief {
    pub fn new(t: f64, mean: DVector<f64>, cov: SpsdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::dim("belief covariance", mean.len(), cov.dim()));
        }
        Ok(GaussianBelief { t, mean, cov })
    }
}

fn require_uncorrelated(model: &LinearModelSpec, t: f64, kind: FilterKind) -> Result<()> {
    if kind != FilterKind::DeterministicCorrelated && model.has_correlated_noise(t) {
        return Err(Error::UnsupportedVariant(format!(
            "{kind:?} filter requires C̃ = 0 (got nonzero C̃ at t = {t})"
        )));
    }
    Ok(())
}

/// Right-hand side of the covariance ODE.
///
/// `DeterministicCorrelated`:
/// `BP + PBᵀ + CCᵀ + C̃C̃ᵀ − (PHᵀ + C̃)R⁻¹(HP + C̃ᵀ)`.
/// `Classical` and `Transport` share the uncorrelated limit
/// `BP + PBᵀ + CCᵀ − PHᵀR⁻¹HP` and reject `C̃ ≠ 0`.
pub fn riccati_rhs(model: &LinearModelSpec, t: f64, p: &DMatrix<f64>, kind: FilterKind) -> Result<DMatrix<f64>> {
    require_uncorrelated(model, t, kind)?;
    let d = model.d_x();
    if p.shape() != (d, d) {
        return Err(Error::dim("riccati_rhs covariance", format!("{d}x{d}"), format!("{:?}", p.shape())));
    }
    let b = model.b_matrix(t);
    let c = model.c_matrix(t);
    let h = model.obs_h(t);
    let r_inv = model.r_inverse(t)?;
    let ct = model.c_tilde_gain(t);
    let bp = &b * p;
    let mut rhs = &bp + bp.transpose() + &c * c.transpose();
    let cross = p * h.transpose() + &ct;
    rhs += &ct * ct.transpose();
    rhs -= &cross * r_inv * cross.transpose();
    Ok(symmetrize(&rhs))
}

/// Symmetrizes, clips eigenvalues in `[-PSD_TOL·(1+λ_max), 0)` to zero and
/// rejects anything more negative.
fn project_spsd(p: DMatrix<f64>, step: usize) -> Result<SpsdMatrix> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            step,
            reason: "covariance has non-finite entries".into(),
        });
    }
    let s = symmetrize(&p);
    let mut sd = eig_sym(&s).map_err(|e| Error::NumericalFailure {
        step,
        reason: e.to_string(),
    })?;
    let lmax = sd.lambda.max().max(0.0);
    let lmin = sd.lambda.min();
    if lmin >= 0.0 {
        return Ok(SpsdMatrix::from_gram(s));
    }
    if lmin < -PSD_TOL * (1.0 + lmax) {
        return Err(Error::NumericalFailure {
            step,
            reason: format!("covariance lost positivity (λ_min = {lmin:e})"),
        });
    }
    sd.lambda.apply(|l| *l = l.max(0.0));
    Ok(SpsdMatrix::from_gram(sd.reconstruct()))
}

/// RK4 solution of the covariance ODE on every grid point.
pub fn integrate_covariance(
    model: &LinearModelSpec,
    grid: &TimeGrid,
    p0: &SpsdMatrix,
    kind: FilterKind,
) -> Result<Vec<SpsdMatrix>> {
    let d = model.d_x();
    if p0.dim() != d {
        return Err(Error::dim("initial covariance", d, p0.dim()));
    }
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.n_steps() + 1);
    out.push(p0.clone());
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let p = out[k].as_matrix();
        let k1 = riccati_rhs(model, t, p, kind)?;
        let k2 = riccati_rhs(model, t + 0.5 * dt, &(p + &k1 * (0.5 * dt)), kind)?;
        let k3 = riccati_rhs(model, t + 0.5 * dt, &(p + &k2 * (0.5 * dt)), kind)?;
        let k4 = riccati_rhs(model, t + dt, &(p + &k3 * dt), kind)?;
        let next = p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        out.push(project_spsd(next, k)?);
    }
    Ok(out)
}

/// Kalman–Bucy mean and covariance along the realized observation path.
///
/// Output has one belief per grid point, starting with `belief0`.
pub fn integrate_moments(
    model: &LinearModelSpec,
    obs: &ObservationRecord,
    belief0: &GaussianBelief,
    kind: FilterKind,
) -> Result<Vec<GaussianBelief>> {
    let d = model.d_x();
    if belief0.mean.len() != d {
        return Err(Error::dim("initial mean", d, belief0.mean.len()));
    }
    if obs.d_y() != model.d_y() {
        return Err(Error::dim("observation increments", model.d_y(), obs.d_y()));
    }
    let grid = obs.grid;
    let covs = integrate_covariance(model, &grid, &belief0.cov, kind)?;
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.n_steps() + 1);
    let mut mean = belief0.mean.clone();
    for (k, cov) in covs.into_iter().enumerate() {
        let t = grid.time(k);
        let next_mean = if k < grid.n_steps() {
            let b = model.b_matrix(t);
            let h = model.obs_h(t);
            let gain = (cov.as_matrix() * h.transpose() + model.c_tilde_gain(t)) * model.r_inverse(t)?;
            let innovation = obs.dy(k) - &h * &mean * dt;
            let m = &mean + &b * &mean * dt + gain * innovation;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Explosion { step: k });
            }
            Some(m)
        } else {
            None
        };
        out.push(GaussianBelief {
            t,
            mean: mean.clone(),
            cov,
        });
        if let Some(m) = next_mean {
            mean = m;
        }
    }
    Ok(out)
}

/// Writes `t, m_1..m_d, p_11..p_dd (row-major), lambda_min, trace`.
pub fn write_beliefs_csv<W: Write>(beliefs: &[GaussianBelief], writer: W) -> Result<()> {
    let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let d = beliefs.first().map(|b| b.mean.len()).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("m_{i}")));
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("p_{i}{j}"));
        }
    }
    header.push("lambda_min".into());
    header.push("trace".into());
    w.write_record(&header).map_err(io)?;
    for b in beliefs {
        let mut row = vec![b.t.to_string()];
        row.extend(b.mean.iter().map(|v| v.to_string()));
        let p = b.cov.as_matrix();
        for i in 0..d {
            for j in 0..d {
                row.push(p[(i, j)].to_string());
            }
        }
        row.push(b.cov.lambda_min().to_string());
        row.push(b.cov.trace().to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
    Ok(())
}
