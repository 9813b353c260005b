//! One function per subcommand. Each writes its CSV files into the output
//! directory and returns a JSON report for the manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use enkbf_core::diagnostics::{check_ensemble_expectation, check_run, DiagnosticSeries, SeriesKind, ViolationReport};
use enkbf_core::enkbf::{run_filter, FilterKind, write_snapshots_csv, write_summaries_csv, FilterVariant, RunOptions};
use enkbf_core::gain_field_1d::{compute_gain_fields, flux_residual, DensityGrid1D};
use enkbf_core::kalman_bucy::{integrate_covariance, integrate_moments, write_beliefs_csv, GaussianBelief};
use enkbf_core::mean_field_coupling::{poc_sweep, surrogate_poc_sweep, write_poc_csv, PocRow, PocSweepConfig};
use enkbf_core::model::{gamma_bar_m, inf_gamma, ModelSpec};
use enkbf_core::sde_sim::{simulate_truth_and_obs, InitialCondition, ObservationRecord, TimeGrid};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{PocMode, RunConfig};
use crate::error::{LabError, Result};
use crate::scenario::{build_scenario, initial_condition, Scenario};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Value,
    pub files: Vec<String>,
    pub violations: usize,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    files: Vec<String>,
}

impl Ctx<'_> {
    fn write<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> enkbf_core::Result<()>,
    {
        let path = self.dir.join(name);
        let display = path.display().to_string();
        let file = File::create(&path).map_err(|e| LabError::io(&display, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| LabError::io(&display, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::new(self.cfg.grid.t_end, self.cfg.grid.n_steps)?)
    }

    fn scenario(&self) -> Result<(Scenario, InitialCondition)> {
        let scenario = build_scenario(self.cfg.require_scenario()?)?;
        let init = initial_condition(self.cfg.initial.as_ref(), scenario.model.d_x())?;
        Ok((scenario, init))
    }

    fn variant(&self, d_x: usize) -> Result<FilterVariant> {
        Ok(FilterVariant::new(
            self.cfg.filter.variant.kind(),
            self.cfg.filter.inverse_strategy(d_x),
        )?)
    }

    /// `checks` is `None` for subcommands that have no bounds to check.
    fn finish(mut self, report: Value, checks: Option<&ViolationReport>) -> Result<Outcome> {
        if let Some(v) = checks {
            self.write("violations.csv", |w| v.write_csv(w))?;
        }
        Ok(Outcome {
            report,
            files: self.files,
            violations: checks.map_or(0, |v| v.len()),
        })
    }
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

/// Least-squares slope of `ln err` against `ln M`.
pub fn loglog_slope(ms: &[usize], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ms.iter().map(|m| (*m as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
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

fn observations(scenario: &Scenario, grid: &TimeGrid, init: &InitialCondition, seeds: &[u64]) -> Result<Vec<ObservationRecord>> {
    Ok(seeds
        .par_iter()
        .map(|&s| simulate_truth_and_obs(&scenario.model, grid, init, s))
        .collect::<enkbf_core::Result<Vec<_>>>()?)
}

pub fn simulate(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let mut ctx = Ctx { cfg, dir, files: vec![] };
    let grid = ctx.grid()?;
    let (scenario, init) = ctx.scenario()?;
    let seeds = cfg.seeds.seeds();
    let records = observations(&scenario, &grid, &init, &seeds)?;
    for (seed, rec) in seeds.iter().zip(&records) {
        ctx.write(&format!("observations_seed{seed}.csv"), |w| rec.write_csv(w))?;
    }
    let report = json!({
        "scenario": scenario.name,
        "records": records.len(),
        "final_truth": records.iter().map(|r| r.truth(grid.n_steps()).as_slice().to_vec()).collect::<Vec<_>>(),
    });
    ctx.finish(report, None)
}

pub fn kb(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let mut ctx = Ctx { cfg, dir, files: vec![] };
    let grid = ctx.grid()?;
    let (scenario, init) = ctx.scenario()?;
    let model = scenario.require_linear("kb")?;
    model.validate_on_grid(&grid)?;
    let kind = cfg.filter.variant.kind();
    let seed = cfg.seeds.base_seed;
    let obs = simulate_truth_and_obs(model, &grid, &init, seed)?;
    let belief0 = GaussianBelief::new(0.0, init.mean().clone(), init.cov())?;
    let beliefs = integrate_moments(model, &obs, &belief0, kind)?;
    ctx.write("observations.csv", |w| obs.write_csv(w))?;
    ctx.write("kb.csv", |w| write_beliefs_csv(&beliefs, w))?;

    let p0 = init.cov();
    let mut diag = DiagnosticSeries::prepare(model, &grid, p0.trace(), p0.lambda_min(), None)?;
    for b in &beliefs {
        diag.record(b.cov.trace(), b.cov.lambda_min());
    }
    let violations = check_run(&diag.samples(), &diag, SeriesKind::MeanField);
    let last = beliefs.last().expect("grid has at least one point");
    let report = json!({
        "scenario": scenario.name,
        "variant": cfg.filter.variant,
        "final_t": last.t,
        "final_mean": last.mean.as_slice().to_vec(),
        "final_cov": matrix_json(last.cov.as_matrix()),
        "final_trace": last.cov.trace(),
        "final_lambda_min": last.cov.lambda_min(),
        "psi_bar": diag.psi_bar,
        "violations": violations.len(),
    });
    ctx.finish(report, Some(&violations))
}

/// One warning per ensemble size instead of one per seed.
fn warn_ill_posed(model: &ModelSpec, m_list: &[usize], grid: &TimeGrid) -> Result<()> {
    for &m in m_list {
        let gbar = gamma_bar_m(model, m, grid)?;
        if gbar <= 0.0 {
            log::warn!("γ̲^M = {gbar} ≤ 0 for M = {m}: well-posedness is not guaranteed, running anyway");
        }
    }
    Ok(())
}

pub fn filter(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let mut ctx = Ctx { cfg, dir, files: vec![] };
    let grid = ctx.grid()?;
    let (scenario, init) = ctx.scenario()?;
    let model = &scenario.model;
    let variant = ctx.variant(model.d_x())?;
    let m = cfg.filter.m;
    warn_ill_posed(model, &[m], &grid)?;
    let options = RunOptions {
        dump_particles_every: cfg.outputs.dump_particles_every,
        quiet: true,
    };
    let seeds = cfg.seeds.seeds();
    let records = observations(&scenario, &grid, &init, &seeds)?;
    let runs = seeds
        .par_iter()
        .zip(records.par_iter())
        .map(|(&s, obs)| run_filter(model, obs, &init, m, &variant, s, &options))
        .collect::<enkbf_core::Result<Vec<_>>>()?;
    for ((seed, obs), run) in seeds.iter().zip(&records).zip(&runs) {
        ctx.write(&format!("observations_seed{seed}.csv"), |w| obs.write_csv(w))?;
        ctx.write(&format!("filter_seed{seed}.csv"), |w| write_summaries_csv(&run.summaries, w))?;
        if options.dump_particles_every.is_some() {
            ctx.write(&format!("particles_seed{seed}.csv"), |w| write_snapshots_csv(&run.snapshots, w))?;
        }
    }
    // the trace bound holds for the expectation, so check the seed average
    let traces: Vec<Vec<f64>> = runs.iter().map(|r| r.diagnostics.trace_p.clone()).collect();
    let violations = check_ensemble_expectation(&traces, &runs[0].diagnostics);
    let kb_final = match &scenario.linear {
        Some(lin) => {
            let covs = integrate_covariance(lin, &grid, &init.cov(), variant.kind)?;
            Some(matrix_json(covs.last().expect("nonempty").as_matrix()))
        }
        None => None,
    };
    let per_seed: Vec<Value> = seeds
        .iter()
        .zip(&runs)
        .map(|(seed, run)| {
            let last = run.summaries.last().expect("nonempty");
            json!({
                "seed": seed,
                "final_mean": last.mean.as_slice().to_vec(),
                "final_cov": matrix_json(last.cov.as_matrix()),
                "singular_events": run.diagnostics.singular_events,
            })
        })
        .collect();
    let report = json!({
        "scenario": scenario.name,
        "variant": cfg.filter.variant,
        "m": m,
        "psi_bar": runs[0].diagnostics.psi_bar,
        "gamma_bar_m": runs[0].diagnostics.gamma_bar_m,
        "singular_events_total": runs.iter().map(|r| r.diagnostics.singular_events).sum::<usize>(),
        "kb_final_cov": kb_final,
        "runs": per_seed,
        "violations": violations.len(),
    });
    ctx.finish(report, Some(&violations))
}

pub fn consistency(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let mut ctx = Ctx { cfg, dir, files: vec![] };
    let grid = ctx.grid()?;
    let (scenario, init) = ctx.scenario()?;
    let lin = scenario.require_linear("consistency")?;
    let variant = ctx.variant(lin.d_x())?;
    let covs = integrate_covariance(lin, &grid, &init.cov(), variant.kind)?;
    let p_ref = covs.last().expect("nonempty").as_matrix().clone();
    let m_list = cfg.m_list();
    let seeds = cfg.seeds.seeds();
    let records = observations(&scenario, &grid, &init, &seeds)?;
    warn_ill_posed(lin, &m_list, &grid)?;
    let options = RunOptions {
        quiet: true,
        ..Default::default()
    };

    // errors[s][j] and traces[j][s] for seed s and ensemble size j
    let per_seed = seeds
        .par_iter()
        .zip(records.par_iter())
        .map(|(&s, obs)| {
            m_list
                .iter()
                .map(|&m| {
                    let run = run_filter(lin, obs, &init, m, &variant, s, &options)?;
                    let err = (run.final_state.cov().as_matrix() - &p_ref).norm();
                    Ok((err, run.diagnostics.trace_p))
                })
                .collect::<enkbf_core::Result<Vec<_>>>()
        })
        .collect::<enkbf_core::Result<Vec<_>>>()?;

    let mut violations = ViolationReport::default();
    let mut rows = Vec::with_capacity(m_list.len());
    for (j, &m) in m_list.iter().enumerate() {
        let errs: Vec<f64> = per_seed.iter().map(|s| s[j].0).collect();
        let traces: Vec<Vec<f64>> = per_seed.iter().map(|s| s[j].1.clone()).collect();
        let p0 = init.cov();
        let diag = DiagnosticSeries::prepare(lin, &grid, p0.trace(), p0.lambda_min(), Some(m))?;
        violations.violations.extend(check_ensemble_expectation(&traces, &diag).violations);
        let (mean, stderr) = mean_and_stderr(&errs);
        rows.push((m, mean, stderr));
    }
    ctx.write("consistency.csv", |w| {
        let io = |e: csv::Error| enkbf_core::Error::Validation(format!("csv write failed: {e}"));
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["M", "mean_err_T", "stderr_T"]).map_err(io)?;
        for (m, mean, se) in &rows {
            c.write_record([m.to_string(), mean.to_string(), se.to_string()]).map_err(io)?;
        }
        c.flush().map_err(|e| enkbf_core::Error::Validation(e.to_string()))
    })?;
    let ms: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let report = json!({
        "scenario": scenario.name,
        "variant": cfg.filter.variant,
        "kb_final_cov": matrix_json(&p_ref),
        "rows": rows.iter().map(|(m, mean, se)| json!({"m": m, "mean_err_T": mean, "stderr_T": se})).collect::<Vec<_>>(),
        "loglog_slope": if ms.len() >= 2 { json!(loglog_slope(&ms, &means)) } else { Value::Null },
        "violations": violations.len(),
    });
    ctx.finish(report, Some(&violations))
}

pub fn poc(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let mut ctx = Ctx { cfg, dir, files: vec![] };
    let grid = ctx.grid()?;
    let (scenario, init) = ctx.scenario()?;
    let variant = ctx.variant(scenario.model.d_x())?;
    let sweep = PocSweepConfig {
        m_list: cfg.m_list(),
        n_seeds: cfg.seeds.n_seeds,
        base_seed: cfg.seeds.base_seed,
        inverse: variant.inverse,
    };
    let mode = cfg.sweep.as_ref().map(|s| s.poc_mode).unwrap_or_default();
    let exact_possible = scenario.linear.is_some() && variant.kind == FilterKind::DeterministicCorrelated;
    let exact = match mode {
        PocMode::Auto => exact_possible,
        PocMode::Exact if !exact_possible => {
            return Err(LabError::Config(
                "exact propagation-of-chaos sweeps need a linear scenario and the deterministic variant".into(),
            ))
        }
        PocMode::Exact => true,
        PocMode::Surrogate => false,
    };
    let rows: Vec<PocRow> = match (&scenario.linear, exact) {
        (Some(lin), true) => poc_sweep(lin, &init, &grid, &sweep)?,
        _ => surrogate_poc_sweep(&scenario.model, &init, &grid, &variant, &sweep)?,
    };
    ctx.write("poc.csv", |w| write_poc_csv(&rows, w))?;
    let ms: Vec<usize> = rows.iter().map(|r| r.m).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_err_t).collect();
    let slope = if ms.len() >= 2 && means.iter().all(|v| *v > 0.0) {
        json!(loglog_slope(&ms, &means))
    } else {
        Value::Null
    };
    let report = json!({
        "scenario": scenario.name,
        "mode": if exact { "exact" } else { "surrogate" },
        "reference_m": if exact { Value::Null } else { json!(8 * ms.iter().copied().max().unwrap_or(0)) },
        "rows": rows.iter().map(|r| json!({
            "m": r.m, "mean_err_T": r.mean_err_t, "stderr_T": r.stderr_t,
            "mean_sup_err": r.mean_sup_err, "stderr_sup": r.stderr_sup,
        })).collect::<Vec<_>>(),
        "loglog_slope_T": slope,
    });
    ctx.finish(report, None)
}

pub fn gain1d(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let mut ctx = Ctx { cfg, dir, files: vec![] };
    let g = cfg
        .gain1d
        .as_ref()
        .ok_or_else(|| LabError::Config("gain1d needs a \"gain1d\" entry".into()))?;
    let density = DensityGrid1D::from_fn(g.x_min, g.x_max, g.n_pts, g.density_fn())?;
    let h = density.sample(|x| g.h(x));
    let fields = compute_gain_fields(&density, &h, g.r, g.c_tilde)?;
    let residual = flux_residual(&density, &fields.k0, &h, g.r)?;
    ctx.write("gain1d.csv", |w| fields.write_csv(w))?;
    let report = json!({
        "h_mean": density.expectation(&h),
        "flux_residual_max": residual,
        "n_pts": density.len(),
    });
    ctx.finish(report, None)
}

pub fn bounds(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let mut ctx = Ctx { cfg, dir, files: vec![] };
    let grid = ctx.grid()?;
    let (scenario, init) = ctx.scenario()?;
    let model = &scenario.model;
    model.validate_on_grid(&grid)?;
    let p0 = init.cov();
    let mut diag = DiagnosticSeries::prepare(model, &grid, p0.trace(), p0.lambda_min(), None)?;
    let riccati = match &scenario.linear {
        Some(lin) => Some(integrate_covariance(lin, &grid, &p0, cfg.filter.variant.kind())?),
        None => None,
    };
    let violations = match &riccati {
        Some(covs) => {
            for p in covs {
                diag.record(p.trace(), p.lambda_min());
            }
            check_run(&diag.samples(), &diag, SeriesKind::MeanField)
        }
        None => ViolationReport::default(),
    };
    ctx.write("bounds.csv", |w| {
        let io = |e: csv::Error| enkbf_core::Error::Validation(format!("csv write failed: {e}"));
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["t", "psi_bar", "lambda_floor", "trace_p", "lambda_min_p"]).map_err(io)?;
        for (k, t) in diag.t.iter().enumerate() {
            let (tr, lm) = match &riccati {
                Some(covs) => (covs[k].trace().to_string(), covs[k].lambda_min().to_string()),
                None => (String::new(), String::new()),
            };
            c.write_record([t.to_string(), diag.psi_bar.to_string(), diag.lambda_floor[k].to_string(), tr, lm])
                .map_err(io)?;
        }
        c.flush().map_err(|e| enkbf_core::Error::Validation(e.to_string()))
    })?;
    let gammas = cfg
        .m_list()
        .iter()
        .map(|&m| Ok(json!({"m": m, "gamma_bar_m": gamma_bar_m(model, m, &grid)?})))
        .collect::<enkbf_core::Result<Vec<_>>>()?;
    let report = json!({
        "scenario": scenario.name,
        "psi_bar": diag.psi_bar,
        "lambda_floor_T": diag.lambda_floor.last(),
        "lambda_floor_clipped": diag.lambda_floor_clipped,
        "inf_gamma": inf_gamma(model, &grid)?,
        "gamma_bar_m": gammas,
        "violations": violations.len(),
    });
    ctx.finish(report, Some(&violations))
}
