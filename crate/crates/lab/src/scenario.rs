//! Built-in models and the initial law.

use std::sync::Arc;

use enkbf_core::matrix_kit::SpsdMatrix;
use enkbf_core::model::{constant, LinearModelSpec, ModelSpec};
use enkbf_core::sde_sim::InitialCondition;
use nalgebra::{dmatrix, DMatrix, DVector};

use crate::config::{InitialConfig, ScenarioConfig};
use crate::error::{LabError, Result};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: ModelSpec,
    /// Present when the model is linear with constant diffusion, i.e. when a
    /// Kalman–Bucy reference exists.
    pub linear: Option<LinearModelSpec>,
}

impl Scenario {
    pub fn require_linear(&self, what: &str) -> Result<&LinearModelSpec> {
        self.linear.as_ref().ok_or_else(|| {
            LabError::Config(format!(
                "{what} needs a linear-Gaussian scenario, {} is not",
                self.name
            ))
        })
    }
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(LabError::Config(format!("{name} must be a rectangular nonempty matrix")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn linear(name: &str, model: LinearModelSpec) -> Scenario {
    Scenario {
        name: name.to_string(),
        model: model.model().clone(),
        linear: Some(model),
    }
}

pub fn lin1() -> LinearModelSpec {
    LinearModelSpec::time_invariant(dmatrix![0.0], dmatrix![1.0], dmatrix![0.0], dmatrix![1.0], dmatrix![1.0])
        .expect("LIN1 is well formed")
}

pub fn lin2() -> LinearModelSpec {
    LinearModelSpec::time_invariant(dmatrix![0.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![2f64.sqrt()])
        .expect("LIN2 is well formed")
}

pub fn linnd() -> LinearModelSpec {
    let i = DMatrix::<f64>::identity(2, 2);
    LinearModelSpec::time_invariant(-&i, i.clone(), &i * 0.5, i.clone(), &i * 2f64.sqrt()).expect("LINND is well formed")
}

pub fn nonlin_sin(c_tilde: f64) -> Result<ModelSpec> {
    Ok(ModelSpec::builder(1, 1, 1, 1)
        .drift(Arc::new(|_, x: &DVector<f64>| x.map(|v| -v + v.sin())))
        .constant_diffusion(constant(dmatrix![1.0]))
        .c_tilde(constant(dmatrix![c_tilde]))
        .obs_h(constant(dmatrix![1.0]))
        .obs_gamma(constant(dmatrix![2f64.sqrt()]))
        .lipschitz(2.0, 0.0)
        .build()?)
}

pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    Ok(match cfg {
        ScenarioConfig::Lin1 {} => linear("LIN1", lin1()),
        ScenarioConfig::Lin2 {} => linear("LIN2", lin2()),
        ScenarioConfig::LinNd {} => linear("LINND", linnd()),
        ScenarioConfig::NonlinSin { c_tilde } => Scenario {
            name: "NONLIN_SIN".into(),
            model: nonlin_sin(*c_tilde)?,
            linear: None,
        },
        ScenarioConfig::Custom {
            b,
            c,
            c_tilde,
            h,
            gamma,
            lip_b,
        } => {
            let b = rows_to_matrix("b", b)?;
            let ct = match c_tilde {
                Some(rows) => rows_to_matrix("c_tilde", rows)?,
                None => DMatrix::zeros(b.nrows(), rows_to_matrix("gamma", gamma)?.ncols()),
            };
            let model = LinearModelSpec::time_invariant(
                b,
                rows_to_matrix("c", c)?,
                ct,
                rows_to_matrix("h", h)?,
                rows_to_matrix("gamma", gamma)?,
            )?;
            let model = match lip_b {
                Some(l) => {
                    let inner = model.into_model().with_lipschitz(*l);
                    LinearModelSpec::new(inner)?
                }
                None => model,
            };
            linear("custom", model)
        }
    })
}

/// `N(mean, cov)` from the config, or `N(0, I)`.
pub fn initial_condition(cfg: Option<&InitialConfig>, d_x: usize) -> Result<InitialCondition> {
    let Some(init) = cfg else {
        return Ok(InitialCondition::gaussian(DVector::zeros(d_x), SpsdMatrix::identity(d_x))?);
    };
    if init.mean.len() != d_x {
        return Err(LabError::Config(format!(
            "initial.mean has length {}, the scenario has d_x = {d_x}",
            init.mean.len()
        )));
    }
    let cov = rows_to_matrix("initial.cov", &init.cov)?;
    if cov.shape() != (d_x, d_x) {
        return Err(LabError::Config(format!(
            "initial.cov must be {d_x}x{d_x}, got {:?}",
            cov.shape()
        )));
    }
    let cov = SpsdMatrix::new(cov).map_err(|e| LabError::Config(format!("initial.cov: {e}")))?;
    Ok(InitialCondition::gaussian(DVector::from_vec(init.mean.clone()), cov)?)
}
