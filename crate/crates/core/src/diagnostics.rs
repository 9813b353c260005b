//! A-priori covariance bounds and run monitoring.
//!
//! `Ψ̄(T)` bounds `sup_t tr P̄_t` of the mean-field covariance and `λ̲_t`
//! is a floor for `λ_min(P̄_t)`. Both use the declared Lipschitz constants
//! and, where a uniform constant is needed, the sup over grid times.

use std::io::Write;

use crate::error::{Error, Result};
use crate::matrix_kit::{frobenius, lambda_max_sym};
use crate::model::{gamma_bar_m, inf_gamma, ModelSpec};
use crate::sde_sim::TimeGrid;

/// Trapezoid rule over grid values.
fn trapezoid(grid: &TimeGrid, values: &[f64]) -> f64 {
    let dt = grid.dt();
    values
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]) * dt)
        .sum()
}

/// `Ψ̄(T) = exp(2∫ Lip(B) + d_x|C̃R⁻¹H| dt) · (tr P̄₀ + ∫ ‖C‖²_∞ + |C̃|² + d_x|C̃R⁻¹C̃ᵀ| dt)`
/// with the time integrals taken by the trapezoid rule on `grid`.
pub fn trace_bound(model: &ModelSpec, grid: &TimeGrid, trace_p0: f64) -> Result<f64> {
    let d_x = model.d_x() as f64;
    let mut growth = Vec::with_capacity(grid.n_steps() + 1);
    let mut forcing = Vec::with_capacity(grid.n_steps() + 1);
    for t in grid.times() {
        let r_inv = model.r_inverse(t)?;
        let ct = model.c_tilde_gain(t);
        let ct_rh = frobenius(&(&ct * &r_inv * model.obs_h(t)));
        let ct_rct = frobenius(&(&ct * &r_inv * ct.transpose()));
        let ct_norm = frobenius(&model.c_tilde(t));
        growth.push(model.lip_b() + d_x * ct_rh);
        forcing.push(model.c_sup().powi(2) + ct_norm * ct_norm + d_x * ct_rct);
    }
    Ok((2.0 * trapezoid(grid, &growth)).exp() * (trace_p0 + trapezoid(grid, &forcing)))
}

/// Solution of the eigenvalue-floor ODE on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaFloor {
    pub values: Vec<f64>,
    /// Set when the RK4 iterate went negative and was clipped to zero.
    pub clipped: bool,
}

/// RK4 solution of
/// `λ̲' = −2 Lip(B) √Ψ̄ √λ̲ − λ_max(HᵀR⁻¹H) λ̲² − 2|C̃R⁻¹H| λ̲ + inf γ / 2`.
///
/// `λ_max(HᵀR⁻¹H)` and `|C̃R⁻¹H|` enter as their sup over the grid.
pub fn lambda_lower_ode(model: &ModelSpec, grid: &TimeGrid, psi_bar: f64, lambda0: f64) -> Result<LambdaFloor> {
    if !(lambda0 >= 0.0) {
        return Err(Error::Validation(format!("λ̲₀ must be nonnegative, got {lambda0}")));
    }
    let mut quad = 0.0_f64;
    let mut lin = 0.0_f64;
    for t in grid.times() {
        let r_inv = model.r_inverse(t)?;
        let h = model.obs_h(t);
        quad = quad.max(lambda_max_sym(&(h.transpose() * &r_inv * &h)));
        lin = lin.max(frobenius(&(model.c_tilde_gain(t) * &r_inv * &h)));
    }
    let g = inf_gamma(model, grid)?;
    let sqrt_term = 2.0 * model.lip_b() * psi_bar.max(0.0).sqrt();
    let rhs = |l: f64| -sqrt_term * l.max(0.0).sqrt() - quad * l * l - 2.0 * lin * l + 0.5 * g;

    let dt = grid.dt();
    let mut values = Vec::with_capacity(grid.n_steps() + 1);
    let mut clipped = false;
    let mut l = lambda0;
    values.push(l);
    for _ in 0..grid.n_steps() {
        let k1 = rhs(l);
        let k2 = rhs(l + 0.5 * dt * k1);
        let k3 = rhs(l + 0.5 * dt * k2);
        let k4 = rhs(l + dt * k3);
        l += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if l < 0.0 {
            l = 0.0;
            clipped = true;
        }
        values.push(l);
    }
    if clipped {
        log::info!("eigenvalue floor clipped at zero (inf γ = {g})");
    }
    Ok(LambdaFloor { values, clipped })
}

/// Bounds for one (model, grid) pair plus the per-step covariance traces
/// observed during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticSeries {
    pub t: Vec<f64>,
    pub trace_p: Vec<f64>,
    pub lambda_min_p: Vec<f64>,
    pub psi_bar: f64,
    pub lambda_floor: Vec<f64>,
    pub lambda_floor_clipped: bool,
    pub inf_gamma: f64,
    /// `γ̲^M`, present for ensemble runs.
    pub gamma_bar_m: Option<f64>,
    pub singular_events: usize,
}

impl DiagnosticSeries {
    /// Computes `Ψ̄(T)`, `λ̲` (started at `λ_min(P₀)/2`) and, for ensemble
    /// runs, `γ̲^M`. The per-step series start empty.
    pub fn prepare(
        model: &ModelSpec,
        grid: &TimeGrid,
        trace_p0: f64,
        lambda_min_p0: f64,
        ensemble_size: Option<usize>,
    ) -> Result<Self> {
        let psi_bar = trace_bound(model, grid, trace_p0)?;
        let floor = lambda_lower_ode(model, grid, psi_bar, 0.5 * lambda_min_p0.max(0.0))?;
        let gamma_bar = match ensemble_size {
            Some(m) => Some(gamma_bar_m(model, m, grid)?),
            None => None,
        };
        Ok(DiagnosticSeries {
            t: grid.times().collect(),
            trace_p: Vec::new(),
            lambda_min_p: Vec::new(),
            psi_bar,
            lambda_floor: floor.values,
            lambda_floor_clipped: floor.clipped,
            inf_gamma: inf_gamma(model, grid)?,
            gamma_bar_m: gamma_bar,
            singular_events: 0,
        })
    }

    pub fn record(&mut self, trace: f64, lambda_min: f64) {
        self.trace_p.push(trace);
        self.lambda_min_p.push(lambda_min);
    }

    pub fn samples(&self) -> Vec<CovarianceSample> {
        self.trace_p
            .iter()
            .zip(&self.lambda_min_p)
            .enumerate()
            .map(|(k, (&trace, &lambda_min))| CovarianceSample {
                t: self.t.get(k).copied().unwrap_or(f64::NAN),
                trace,
                lambda_min,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSample {
    pub t: f64,
    pub trace: f64,
    pub lambda_min: f64,
}

/// Which checks apply to a covariance series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    /// Riccati / mean-field covariance: trace bound and eigenvalue floor.
    MeanField,
    /// Ensemble covariance: trace bound only (the theory bounds it in
    /// expectation, so callers pass seed averages).
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Trace,
    LambdaFloor,
}

impl ViolationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationKind::Trace => "trace",
            ViolationKind::LambdaFloor => "lambda_floor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub step: usize,
    pub kind: ViolationKind,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    /// Writes `step, kind, value, bound`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "kind", "value", "bound"]).map_err(io)?;
        for v in &self.violations {
            w.write_record([
                v.step.to_string(),
                v.kind.as_str().to_string(),
                v.value.to_string(),
                v.bound.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
        Ok(())
    }
}

/// Absolute slack for round-off in bound comparisons.
const CHECK_SLACK: f64 = 1e-12;

/// Lists every grid step where `tr P > Ψ̄` or, for mean-field series,
/// `λ_min(P) < λ̲`. The series is assumed grid-aligned with `diag`.
pub fn check_run(series: &[CovarianceSample], diag: &DiagnosticSeries, kind: SeriesKind) -> ViolationReport {
    let mut violations = Vec::new();
    for (step, s) in series.iter().enumerate() {
        if s.trace > diag.psi_bar + CHECK_SLACK {
            violations.push(Violation {
                step,
                kind: ViolationKind::Trace,
                value: s.trace,
                bound: diag.psi_bar,
            });
        }
        if kind == SeriesKind::MeanField {
            if let Some(&floor) = diag.lambda_floor.get(step) {
                if s.lambda_min < floor - CHECK_SLACK {
                    violations.push(Violation {
                        step,
                        kind: ViolationKind::LambdaFloor,
                        value: s.lambda_min,
                        bound: floor,
                    });
                }
            }
        }
    }
    ViolationReport { violations }
}

/// Seed-averaged trace check for ensemble runs: `traces[s][k]` is
/// `tr P^M` of seed `s` at step `k`.
pub fn check_ensemble_expectation(traces: &[Vec<f64>], diag: &DiagnosticSeries) -> ViolationReport {
    let n_steps = traces.iter().map(|v| v.len()).min().unwrap_or(0);
    let n = traces.len() as f64;
    let series: Vec<CovarianceSample> = (0..n_steps)
        .map(|k| CovarianceSample {
            t: diag.t.get(k).copied().unwrap_or(f64::NAN),
            trace: traces.iter().map(|v| v[k]).sum::<f64>() / n,
            lambda_min: f64::INFINITY,
        })
        .collect();
    check_run(&series, diag, SeriesKind::Ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModelSpec;
    use nalgebra::DMatrix;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn lin1() -> LinearModelSpec {
        LinearModelSpec::time_invariant(s(0.0), s(1.0), s(0.0), s(1.0), s(1.0)).unwrap()
    }

    fn lin2() -> LinearModelSpec {
        LinearModelSpec::time_invariant(s(0.0), s(1.0), s(1.0), s(1.0), s(2f64.sqrt())).unwrap()
    }

    #[test]
    fn trace_bound_examples() {
        assert!((trace_bound(&lin1(), &grid(1000), 1.0).unwrap() - 2.0).abs() < 1e-12);
        let quiet = LinearModelSpec::time_invariant(s(0.0), s(0.0), s(0.0), s(1.0), s(1.0)).unwrap();
        assert_eq!(trace_bound(&quiet, &grid(10), 0.7).unwrap(), 0.7);
        let expected = std::f64::consts::E * 3.5;
        assert!((trace_bound(&lin2(), &grid(1000), 1.0).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn trace_bound_is_monotone_in_horizon() {
        let values: Vec<f64> = [0.25, 0.5, 1.0, 2.0]
            .iter()
            .map(|&t| trace_bound(&lin2(), &TimeGrid::new(t, 100).unwrap(), 1.0).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn lambda_floor_lin1_approaches_equilibrium() {
        let f = lambda_lower_ode(&lin1(), &TimeGrid::new(5.0, 5000).unwrap(), 2.0, 0.5).unwrap();
        assert!(!f.clipped);
        assert!(f.values.windows(2).all(|w| w[1] >= w[0]));
        let eq = 0.5f64.sqrt();
        assert!(f.values.iter().all(|v| *v <= eq + 1e-12));
        // closed form of λ' = a² − λ²: λ = a tanh(a t + atanh(λ₀/a))
        let exact = eq * (eq * 5.0 + (0.5 / eq).atanh()).tanh();
        assert!((f.values.last().unwrap() - exact).abs() < 1e-10);
    }

    #[test]
    fn lambda_floor_linear_growth_without_observation() {
        let model = LinearModelSpec::time_invariant(s(0.0), s(1.0), s(0.0), s(0.0), s(1.0)).unwrap();
        let f = lambda_lower_ode(&model, &grid(100), 1.0, 0.2).unwrap();
        for (k, v) in f.values.iter().enumerate() {
            assert!((v - (0.2 + 0.5 * grid(100).time(k))).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_floor_degenerate_stays_zero() {
        let model = LinearModelSpec::time_invariant(s(0.0), s(0.0), s(0.0), s(1.0), s(1.0)).unwrap();
        let f = lambda_lower_ode(&model, &grid(100), 1.0, 0.0).unwrap();
        assert!(f.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lambda_floor_is_clipped_when_gamma_vanishes() {
        let model = LinearModelSpec::time_invariant(s(1.0), s(0.0), s(0.0), s(1.0), s(1.0)).unwrap();
        let f = lambda_lower_ode(&model, &TimeGrid::new(10.0, 1000).unwrap(), 4.0, 0.5).unwrap();
        assert!(f.clipped);
        assert!(f.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn check_run_flags_fabricated_violation() {
        let diag = DiagnosticSeries::prepare(&lin1(), &grid(4), 1.0, 1.0, None).unwrap();
        let mut series: Vec<CovarianceSample> = (0..5)
            .map(|k| CovarianceSample { t: k as f64, trace: 1.0, lambda_min: 1.0 })
            .collect();
        assert!(check_run(&series, &diag, SeriesKind::MeanField).is_empty());
        series[2].trace = diag.psi_bar + 1.0;
        let report = check_run(&series, &diag, SeriesKind::MeanField);
        assert_eq!(report.len(), 1);
        assert_eq!(report.violations[0].step, 2);
        assert_eq!(report.violations[0].kind, ViolationKind::Trace);
        assert!(check_run(&[], &diag, SeriesKind::MeanField).is_empty());
    }

    #[test]
    fn floor_check_only_for_mean_field() {
        let diag = DiagnosticSeries::prepare(&lin1(), &grid(4), 1.0, 1.0, Some(10)).unwrap();
        let series = vec![CovarianceSample { t: 0.0, trace: 0.1, lambda_min: 0.0 }];
        assert_eq!(check_run(&series, &diag, SeriesKind::MeanField).len(), 1);
        assert!(check_run(&series, &diag, SeriesKind::Ensemble).is_empty());
        assert!(diag.gamma_bar_m.is_some());
    }

    #[test]
    fn expectation_check_averages_seeds() {
        let diag = DiagnosticSeries::prepare(&lin1(), &grid(2), 1.0, 1.0, Some(10)).unwrap();
        let psi = diag.psi_bar;
        let traces = vec![vec![1.0, psi + 0.5, 1.0], vec![1.0, psi - 1.0, 1.0]];
        assert!(check_ensemble_expectation(&traces, &diag).is_empty());
        let traces = vec![vec![1.0, psi + 2.0, 1.0], vec![1.0, psi - 1.0, 1.0]];
        assert_eq!(check_ensemble_expectation(&traces, &diag).len(), 1);
    }

    #[test]
    fn report_csv_layout() {
        let report = ViolationReport {
            violations: vec![Violation { step: 3, kind: ViolationKind::LambdaFloor, value: 0.1, bound: 0.2 }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,kind,value,bound\n3,lambda_floor,0.1,0.2\n");
    }
}
