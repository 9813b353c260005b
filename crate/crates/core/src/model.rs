//! Filtering problem declarations.
//!
//! A [`ModelSpec`] describes
//!
//! ```text
//! dX = B(t, X) dt + C(t, X) dW + C̃(t) dV
//! dY = H(t) X dt + Γ(t) dV
//! ```
//!
//! where the same `V` drives the signal and the observation. `C̃` depends on
//! time only and the filters use a linear observation operator `H(t)`; an
//! optional nonlinear observation function is used only to generate truth
//! data.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrix_kit::{frobenius, lambda_min_sym};
use crate::sde_sim::TimeGrid;

pub type TimeMatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type StateVectorFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StateMatrixFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Smallest admissible eigenvalue of `R = ΓΓᵀ`.
pub const R_MIN_EIGENVALUE: f64 = 1e-12;

/// Wraps a constant matrix as a time-dependent coefficient.
pub fn constant(m: DMatrix<f64>) -> TimeMatrixFn {
    Arc::new(move |_| m.clone())
}

#[derive(Clone)]
pub enum Drift {
    /// `B(t, x) = B_t x`.
    Linear(TimeMatrixFn),
    Nonlinear(StateVectorFn),
}

#[derive(Clone)]
pub enum Diffusion {
    /// `C(t, x) = C_t`, constant in the state.
    Constant(TimeMatrixFn),
    StateDependent(StateMatrixFn),
}

#[derive(Clone)]
pub struct ModelSpec {
    d_x: usize,
    d_w: usize,
    d_v: usize,
    d_y: usize,
    drift: Drift,
    diffusion: Diffusion,
    c_tilde: TimeMatrixFn,
    obs_h: TimeMatrixFn,
    obs_gamma: TimeMatrixFn,
    lip_b: f64,
    lip_c: f64,
    c_sup: f64,
    truth_h: Option<StateVectorFn>,
    gamma_samples: Vec<DVector<f64>>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("d_x", &self.d_x)
            .field("d_w", &self.d_w)
            .field("d_v", &self.d_v)
            .field("d_y", &self.d_y)
            .field("linear_drift", &matches!(self.drift, Drift::Linear(_)))
            .field("constant_diffusion", &matches!(self.diffusion, Diffusion::Constant(_)))
            .field("lip_b", &self.lip_b)
            .field("lip_c", &self.lip_c)
            .field("c_sup", &self.c_sup)
            .finish()
    }
}

pub struct ModelBuilder {
    d_x: usize,
    d_w: usize,
    d_v: usize,
    d_y: usize,
    drift: Option<Drift>,
    diffusion: Option<Diffusion>,
    c_tilde: Option<TimeMatrixFn>,
    obs_h: Option<TimeMatrixFn>,
    obs_gamma: Option<TimeMatrixFn>,
    lip_b: f64,
    lip_c: f64,
    c_sup: Option<f64>,
    truth_h: Option<StateVectorFn>,
    gamma_samples: Vec<DVector<f64>>,
}

impl ModelBuilder {
    pub fn linear_drift(mut self, b: TimeMatrixFn) -> Self {
        self.drift = Some(Drift::Linear(b));
        self
    }

    pub fn drift(mut self, b: StateVectorFn) -> Self {
        self.drift = Some(Drift::Nonlinear(b));
        self
    }

    pub fn constant_diffusion(mut self, c: TimeMatrixFn) -> Self {
        self.diffusion = Some(Diffusion::Constant(c));
        self
    }

    pub fn diffusion(mut self, c: StateMatrixFn) -> Self {
        self.diffusion = Some(Diffusion::StateDependent(c));
        self
    }

    pub fn c_tilde(mut self, c_tilde: TimeMatrixFn) -> Self {
        self.c_tilde = Some(c_tilde);
        self
    }

    pub fn obs_h(mut self, h: TimeMatrixFn) -> Self {
        self.obs_h = Some(h);
        self
    }

    pub fn obs_gamma(mut self, gamma: TimeMatrixFn) -> Self {
        self.obs_gamma = Some(gamma);
        self
    }

    /// User-declared Lipschitz constants of `B` and `C`.
    pub fn lipschitz(mut self, lip_b: f64, lip_c: f64) -> Self {
        self.lip_b = lip_b;
        self.lip_c = lip_c;
        self
    }

    /// `sup |C(t, x)|` (Frobenius). Defaults to `|C_0|` for constant `C`.
    pub fn c_sup(mut self, c_sup: f64) -> Self {
        self.c_sup = Some(c_sup);
        self
    }

    pub fn truth_observation(mut self, h: StateVectorFn) -> Self {
        self.truth_h = Some(h);
        self
    }

    /// States over which `inf_x λ_min(C Cᵀ)` is approximated when `C` is
    /// state dependent.
    pub fn gamma_samples(mut self, samples: Vec<DVector<f64>>) -> Self {
        self.gamma_samples = samples;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let missing = |what: &str| Error::ModelValidation(format!("{what} not set"));
        let d_x = self.d_x;
        let diffusion = self.diffusion.ok_or_else(|| missing("diffusion C"))?;
        let c_sup = match (self.c_sup, &diffusion) {
            (Some(v), _) => v,
            (None, Diffusion::Constant(c)) => frobenius(&c(0.0)),
            (None, Diffusion::StateDependent(_)) => {
                return Err(missing("c_sup for state-dependent diffusion"))
            }
        };
        let model = ModelSpec {
            d_x,
            d_w: self.d_w,
            d_v: self.d_v,
            d_y: self.d_y,
            drift: self.drift.ok_or_else(|| missing("drift B"))?,
            diffusion,
            c_tilde: self
                .c_tilde
                .unwrap_or_else(|| constant(DMatrix::zeros(d_x, self.d_v))),
            obs_h: self.obs_h.ok_or_else(|| missing("observation operator H"))?,
            obs_gamma: self.obs_gamma.ok_or_else(|| missing("observation noise Γ"))?,
            lip_b: self.lip_b,
            lip_c: self.lip_c,
            c_sup,
            truth_h: self.truth_h,
            gamma_samples: if self.gamma_samples.is_empty() {
                vec![DVector::zeros(d_x)]
            } else {
                self.gamma_samples
            },
        };
        for (name, v) in [("lip_b", model.lip_b), ("lip_c", model.lip_c), ("c_sup", model.c_sup)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::ModelValidation(format!("{name} must be a nonnegative real, got {v}")));
            }
        }
        model.validate_at(0.0)?;
        Ok(model)
    }
}

fn check_shape(what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::ModelValidation(format!(
            "{what} has shape {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

impl ModelSpec {
    pub fn builder(d_x: usize, d_w: usize, d_v: usize, d_y: usize) -> ModelBuilder {
        ModelBuilder {
            d_x,
            d_w,
            d_v,
            d_y,
            drift: None,
            diffusion: None,
            c_tilde: None,
            obs_h: None,
            obs_gamma: None,
            lip_b: 0.0,
            lip_c: 0.0,
            c_sup: None,
            truth_h: None,
            gamma_samples: Vec::new(),
        }
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }
    pub fn d_w(&self) -> usize {
        self.d_w
    }
    pub fn d_v(&self) -> usize {
        self.d_v
    }
    pub fn d_y(&self) -> usize {
        self.d_y
    }
    pub fn lip_b(&self) -> f64 {
        self.lip_b
    }
    pub fn lip_c(&self) -> f64 {
        self.lip_c
    }
    /// Replaces the declared Lipschitz constant of the drift.
    pub fn with_lipschitz(mut self, lip_b: f64) -> Self {
        self.lip_b = lip_b;
        self
    }
    pub fn c_sup(&self) -> f64 {
        self.c_sup
    }
    pub fn drift_kind(&self) -> &Drift {
        &self.drift
    }
    pub fn diffusion_kind(&self) -> &Diffusion {
        &self.diffusion
    }
    pub fn has_nonlinear_truth_observation(&self) -> bool {
        self.truth_h.is_some()
    }
    pub fn gamma_sample_points(&self) -> &[DVector<f64>] {
        &self.gamma_samples
    }

    pub fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match &self.drift {
            Drift::Linear(b) => b(t) * x,
            Drift::Nonlinear(f) => f(t, x),
        }
    }

    /// Drift applied to every column of `particles`.
    pub fn drift_ensemble(&self, t: f64, particles: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.drift {
            Drift::Linear(b) => b(t) * particles,
            Drift::Nonlinear(f) => {
                let mut out = DMatrix::zeros(self.d_x, particles.ncols());
                for (i, col) in particles.column_iter().enumerate() {
                    out.set_column(i, &f(t, &col.into_owned()));
                }
                out
            }
        }
    }

    pub fn diffusion(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.diffusion {
            Diffusion::Constant(c) => c(t),
            Diffusion::StateDependent(f) => f(t, x),
        }
    }

    /// `C_t` if the diffusion is declared constant in the state.
    pub fn constant_diffusion(&self, t: f64) -> Option<DMatrix<f64>> {
        match &self.diffusion {
            Diffusion::Constant(c) => Some(c(t)),
            Diffusion::StateDependent(_) => None,
        }
    }

    /// `C(t, Xⁱ) ΔWⁱ` for every particle column.
    pub fn diffusion_ensemble(&self, t: f64, particles: &DMatrix<f64>, dw: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.diffusion {
            Diffusion::Constant(c) => c(t) * dw,
            Diffusion::StateDependent(f) => {
                let mut out = DMatrix::zeros(self.d_x, particles.ncols());
                for i in 0..particles.ncols() {
                    let x = particles.column(i).into_owned();
                    out.set_column(i, &(f(t, &x) * dw.column(i)));
                }
                out
            }
        }
    }

    /// `C̃_t` as declared (d_x × d_v).
    pub fn c_tilde(&self, t: f64) -> DMatrix<f64> {
        (self.c_tilde)(t)
    }

    /// `C̃_t` in the role it plays inside the gain `(P Hᵀ + C̃) R⁻¹`, i.e. as a
    /// d_x × d_y matrix. When `d_v ≠ d_y` validation guarantees `C̃ = 0`.
    pub fn c_tilde_gain(&self, t: f64) -> DMatrix<f64> {
        if self.d_v == self.d_y {
            self.c_tilde(t)
        } else {
            DMatrix::zeros(self.d_x, self.d_y)
        }
    }

    pub fn has_correlated_noise(&self, t: f64) -> bool {
        self.c_tilde(t).iter().any(|v| *v != 0.0)
    }

    pub fn obs_h(&self, t: f64) -> DMatrix<f64> {
        (self.obs_h)(t)
    }

    pub fn obs_gamma(&self, t: f64) -> DMatrix<f64> {
        (self.obs_gamma)(t)
    }

    /// Observation function used to generate truth data: the nonlinear one
    /// if declared, otherwise `H_t x`.
    pub fn truth_observation(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match &self.truth_h {
            Some(h) => h(t, x),
            None => self.obs_h(t) * x,
        }
    }

    /// `R_t = Γ_t Γ_tᵀ`, rejected if not positive definite.
    pub fn r_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        let g = self.obs_gamma(t);
        let r = &g * g.transpose();
        let lmin = lambda_min_sym(&r);
        if !(lmin > R_MIN_EIGENVALUE) {
            return Err(Error::ModelValidation(format!(
                "R = ΓΓᵀ is singular at t = {t} (λ_min = {lmin:e})"
            )));
        }
        Ok(r)
    }

    pub fn r_inverse(&self, t: f64) -> Result<DMatrix<f64>> {
        let r = self.r_matrix(t)?;
        let inv = r
            .cholesky()
            .ok_or_else(|| Error::ModelValidation(format!("R is not positive definite at t = {t}")))?
            .inverse();
        Ok(crate::matrix_kit::symmetrize(&inv))
    }

    /// Checks every coefficient shape at one time.
    pub fn validate_at(&self, t: f64) -> Result<()> {
        let (d_x, d_w, d_v, d_y) = (self.d_x, self.d_w, self.d_v, self.d_y);
        if d_x == 0 || d_y == 0 || d_v == 0 {
            return Err(Error::ModelValidation("dimensions must be positive".into()));
        }
        let probe = self
            .gamma_samples
            .first()
            .cloned()
            .unwrap_or_else(|| DVector::zeros(d_x));
        if probe.len() != d_x {
            return Err(Error::ModelValidation(format!(
                "gamma sample points must have length {d_x}, got {}",
                probe.len()
            )));
        }
        let b = self.drift(t, &probe);
        if b.len() != d_x {
            return Err(Error::ModelValidation(format!("drift returns length {}, expected {d_x}", b.len())));
        }
        if let Drift::Linear(bm) = &self.drift {
            check_shape("B", &bm(t), d_x, d_x)?;
        }
        check_shape("C", &self.diffusion(t, &probe), d_x, d_w)?;
        let ct = self.c_tilde(t);
        check_shape("C̃", &ct, d_x, d_v)?;
        check_shape("H", &self.obs_h(t), d_y, d_x)?;
        check_shape("Γ", &self.obs_gamma(t), d_y, d_v)?;
        if d_v != d_y && ct.iter().any(|v| *v != 0.0) {
            return Err(Error::ModelValidation(format!(
                "correlated noise (C̃ ≠ 0) requires d_v = d_y, got d_v = {d_v}, d_y = {d_y}"
            )));
        }
        if let Some(h) = &self.truth_h {
            let y = h(t, &probe);
            if y.len() != d_y {
                return Err(Error::ModelValidation(format!(
                    "truth observation returns length {}, expected {d_y}",
                    y.len()
                )));
            }
        }
        let all_finite = [self.c_tilde(t), self.obs_h(t), self.obs_gamma(t)]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::ModelValidation(format!("non-finite coefficient at t = {t}")));
        }
        Ok(())
    }

    /// Shape checks plus `R_t` positive definite at every grid time. Filters
    /// require this; truth simulation only needs the shapes.
    pub fn validate_on_grid(&self, grid: &TimeGrid) -> Result<()> {
        for t in grid.times() {
            self.validate_at(t)?;
            self.r_matrix(t)?;
        }
        Ok(())
    }
}

/// A model with linear drift `B_t x` and state-independent diffusion `C_t`.
#[derive(Clone, Debug)]
pub struct LinearModelSpec(ModelSpec);

impl LinearModelSpec {
    pub fn new(model: ModelSpec) -> Result<Self> {
        if !matches!(model.drift, Drift::Linear(_)) {
            return Err(Error::ModelValidation("linear model requires a linear drift B_t x".into()));
        }
        if !matches!(model.diffusion, Diffusion::Constant(_)) {
            return Err(Error::ModelValidation(
                "linear model requires a state-independent diffusion C_t".into(),
            ));
        }
        Ok(LinearModelSpec(model))
    }

    /// Time-invariant linear model from constant matrices. `lip_b` is set to
    /// the spectral norm of `B`.
    pub fn time_invariant(
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        c_tilde: DMatrix<f64>,
        h: DMatrix<f64>,
        gamma: DMatrix<f64>,
    ) -> Result<Self> {
        let d_x = b.nrows();
        let d_w = c.ncols();
        let d_v = gamma.ncols();
        let d_y = h.nrows();
        let lip_b = if b.is_empty() { 0.0 } else { b.clone().svd(false, false).singular_values.max() };
        let model = ModelSpec::builder(d_x, d_w, d_v, d_y)
            .linear_drift(constant(b))
            .constant_diffusion(constant(c))
            .c_tilde(constant(c_tilde))
            .obs_h(constant(h))
            .obs_gamma(constant(gamma))
            .lipschitz(lip_b, 0.0)
            .build()?;
        LinearModelSpec::new(model)
    }

    pub fn b_matrix(&self, t: f64) -> DMatrix<f64> {
        match &self.0.drift {
            Drift::Linear(b) => b(t),
            Drift::Nonlinear(_) => unreachable!("checked at construction"),
        }
    }

    pub fn c_matrix(&self, t: f64) -> DMatrix<f64> {
        match &self.0.diffusion {
            Diffusion::Constant(c) => c(t),
            Diffusion::StateDependent(_) => unreachable!("checked at construction"),
        }
    }

    pub fn model(&self) -> &ModelSpec {
        &self.0
    }

    pub fn into_model(self) -> ModelSpec {
        self.0
    }
}

impl std::ops::Deref for LinearModelSpec {
    type Target = ModelSpec;
    fn deref(&self) -> &ModelSpec {
        &self.0
    }
}

/// `γ_t = λ_min(C̃(I − R⁻¹)C̃ᵀ) + inf_x λ_min(C(x) C(x)ᵀ)`.
///
/// For constant `C` the sample set is ignored; otherwise the infimum is taken
/// over `x_samples`.
pub fn gamma(model: &ModelSpec, t: f64, x_samples: &[DVector<f64>]) -> Result<f64> {
    let ct = model.c_tilde_gain(t);
    let r_inv = model.r_inverse(t)?;
    let d_y = model.d_y();
    let inner = DMatrix::identity(d_y, d_y) - r_inv;
    let correlated = lambda_min_sym(&(&ct * inner * ct.transpose()));
    let diffusion = match model.constant_diffusion(t) {
        Some(c) => lambda_min_sym(&(&c * c.transpose())),
        None => {
            if x_samples.is_empty() {
                return Err(Error::Validation("gamma needs at least one sample state".into()));
            }
            log::warn!(
                "state-dependent C: inf_x λ_min(CCᵀ) approximated on {} sample points",
                x_samples.len()
            );
            x_samples
                .iter()
                .map(|x| {
                    let c = model.diffusion(t, x);
                    lambda_min_sym(&(&c * c.transpose()))
                })
                .fold(f64::INFINITY, f64::min)
        }
    };
    Ok(correlated + diffusion)
}

/// `inf_t [γ_t − 2/(M−1) (1 + √d_x)(‖C‖²_∞ + |C̃_t|²)]` over the grid times.
pub fn gamma_bar_m(model: &ModelSpec, m: usize, grid: &TimeGrid) -> Result<f64> {
    if m < 2 {
        return Err(Error::InsufficientEnsemble { m });
    }
    let factor = 2.0 / (m - 1) as f64 * (1.0 + (model.d_x() as f64).sqrt());
    let c_sq = model.c_sup() * model.c_sup();
    let mut inf = f64::INFINITY;
    for t in grid.times() {
        let g = gamma(model, t, model.gamma_sample_points())?;
        let ct = frobenius(&model.c_tilde(t));
        inf = inf.min(g - factor * (c_sq + ct * ct));
    }
    Ok(inf)
}

/// `inf_t γ_t` over the grid times.
pub fn inf_gamma(model: &ModelSpec, grid: &TimeGrid) -> Result<f64> {
    let mut inf = f64::INFINITY;
    for t in grid.times() {
        inf = inf.min(gamma(model, t, model.gamma_sample_points())?);
    }
    Ok(inf)
}

/// Crude sampling estimate of `Lip(B)` at time `t`: the largest difference
/// quotient over all sample pairs. For diagnostics only; the bounds always
/// use the declared constant.
pub fn estimate_lipschitz_b(model: &ModelSpec, t: f64, samples: &[DVector<f64>]) -> f64 {
    let drifts: Vec<DVector<f64>> = samples.iter().map(|x| model.drift(t, x)).collect();
    let mut best = 0.0_f64;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let dx = (&samples[i] - &samples[j]).norm();
            if dx > 0.0 {
                best = best.max((&drifts[i] - &drifts[j]).norm() / dx);
            }
        }
    }
    best
}
