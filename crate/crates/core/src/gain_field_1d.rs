//! Consistent gain fields for a one-dimensional gridded density.
//!
//! For a density `η` and observation function `H` the uncorrelated gain `K⁰`
//! solves
//!
//! ```text
//! −(η K⁰)' = (H − η(H)) r⁻¹ η
//! ```
//!
//! and we take the representative with zero flux at the left end of the
//! grid, i.e. `η K⁰(x) = −∫_{−∞}^{x} (H − η(H)) r⁻¹ η dy`. The correlated gain
//! is the translation `K⁰ + c̃ / r`, and the correction drift `a` follows from
//! `K` with the harmonic part set to zero.

use std::io::Write;

use crate::error::{Error, Result};

/// Tolerance on the trapezoid integral of the density.
pub const DENSITY_MASS_TOL: f64 = 1e-6;
/// Relative density floor below which gains are extrapolated.
pub const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid1D {
    x: Vec<f64>,
    eta: Vec<f64>,
    dx: f64,
}

impl DensityGrid1D {
    /// Uniform grid `x_j = x_min + j dx` with density values `eta`.
    pub fn new(x_min: f64, dx: f64, eta: Vec<f64>) -> Result<Self> {
        if eta.len() < 3 {
            return Err(Error::Validation("density grid needs at least 3 points".into()));
        }
        if !(dx > 0.0 && dx.is_finite() && x_min.is_finite()) {
            return Err(Error::Validation(format!("invalid grid spacing {dx}")));
        }
        if eta.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("density values must be finite and nonnegative".into()));
        }
        let x: Vec<f64> = (0..eta.len()).map(|j| x_min + j as f64 * dx).collect();
        let grid = DensityGrid1D { x, eta, dx };
        let mass = grid.integrate(&grid.eta);
        if (mass - 1.0).abs() > DENSITY_MASS_TOL {
            return Err(Error::Validation(format!(
                "density integrates to {mass}, expected 1 within {DENSITY_MASS_TOL:e}"
            )));
        }
        Ok(grid)
    }

    /// Samples `f` on `n_pts` points over `[x_min, x_max]` and normalizes by
    /// the trapezoid mass.
    pub fn from_fn<F: Fn(f64) -> f64>(x_min: f64, x_max: f64, n_pts: usize, f: F) -> Result<Self> {
        if n_pts < 3 || !(x_max > x_min) {
            return Err(Error::Validation(format!(
                "need n_pts >= 3 and x_max > x_min (got {n_pts}, [{x_min}, {x_max}])"
            )));
        }
        let dx = (x_max - x_min) / (n_pts - 1) as f64;
        let raw: Vec<f64> = (0..n_pts).map(|j| f(x_min + j as f64 * dx)).collect();
        let mass = trapezoid(&raw, dx);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Validation(format!("density has mass {mass}")));
        }
        Self::new(x_min, dx, raw.into_iter().map(|v| v / mass).collect())
    }

    /// `N(mean, var)` on `[x_min, x_max]`.
    pub fn gaussian(mean: f64, var: f64, x_min: f64, x_max: f64, n_pts: usize) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::Validation(format!("variance must be positive, got {var}")));
        }
        Self::from_fn(x_min, x_max, n_pts, |x| (-(x - mean).powi(2) / (2.0 * var)).exp())
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        trapezoid(values, self.dx)
    }

    /// `η(f) = ∫ f η / ∫ η`, both by trapezoid.
    pub fn expectation(&self, f: &[f64]) -> f64 {
        let weighted: Vec<f64> = f.iter().zip(&self.eta).map(|(a, b)| a * b).collect();
        self.integrate(&weighted) / self.integrate(&self.eta)
    }

    /// Indices where `η ≥ DENSITY_FLOOR · max η`.
    fn valid_mask(&self) -> Vec<bool> {
        let max = self.eta.iter().cloned().fold(0.0_f64, f64::max);
        let floor = DENSITY_FLOOR * max;
        self.eta.iter().map(|e| *e >= floor && *e > 0.0).collect()
    }

    /// Samples `h` on the grid points.
    pub fn sample<F: Fn(f64) -> f64>(&self, h: F) -> Vec<f64> {
        self.x.iter().map(|&x| h(x)).collect()
    }
}

fn trapezoid(values: &[f64], dx: f64) -> f64 {
    values.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dx).sum()
}

/// Cumulative trapezoid integral, starting at 0.
fn cumulative_trapezoid(values: &[f64], dx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(acc);
    for w in values.windows(2) {
        acc += 0.5 * (w[0] + w[1]) * dx;
        out.push(acc);
    }
    out
}

fn check_len(what: &'static str, values: &[f64], n: usize) -> Result<()> {
    if values.len() != n {
        return Err(Error::dim(what, n, values.len()));
    }
    Ok(())
}

/// Replaces entries where `valid` is false by linear extrapolation from the
/// two nearest valid points on the same side (or the single nearest one).
fn extrapolate_invalid(values: &mut [f64], x: &[f64], valid: &[bool]) {
    let idx: Vec<usize> = (0..values.len()).filter(|&j| valid[j]).collect();
    if idx.is_empty() {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (first, last) = (idx[0], idx[idx.len() - 1]);
    let line = |a: usize, b: usize, xq: f64, vals: &[f64]| {
        vals[a] + (vals[b] - vals[a]) / (x[b] - x[a]) * (xq - x[a])
    };
    let snapshot = values.to_vec();
    for j in 0..values.len() {
        if valid[j] {
            continue;
        }
        values[j] = if j < first {
            if idx.len() >= 2 {
                line(idx[0], idx[1], x[j], &snapshot)
            } else {
                snapshot[first]
            }
        } else if j > last {
            if idx.len() >= 2 {
                line(idx[idx.len() - 2], last, x[j], &snapshot)
            } else {
                snapshot[last]
            }
        } else {
            // interior hole: interpolate between the bracketing valid points
            let right = idx.partition_point(|&i| i < j);
            line(idx[right - 1], idx[right], x[j], &snapshot)
        };
    }
}

/// `K⁰(x_j) = −(1/η(x_j)) ∫_{x_0}^{x_j} (H − η(H)) r⁻¹ η dy`.
pub fn gain_k0(density: &DensityGrid1D, h: &[f64], r: f64) -> Result<Vec<f64>> {
    check_len("observation values", h, density.len())?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Validation(format!("r must be positive, got {r}")));
    }
    let h_mean = density.expectation(h);
    let source: Vec<f64> = h
        .iter()
        .zip(density.eta())
        .map(|(hv, e)| (hv - h_mean) / r * e)
        .collect();
    let flux = cumulative_trapezoid(&source, density.dx());
    let valid = density.valid_mask();
    let mut k0: Vec<f64> = flux
        .iter()
        .zip(density.eta())
        .zip(&valid)
        .map(|((f, e), ok)| if *ok { -f / e } else { 0.0 })
        .collect();
    extrapolate_invalid(&mut k0, density.x(), &valid);
    Ok(k0)
}

/// `K⁰ + c̃ / r` pointwise.
pub fn gain_correlated(k0: &[f64], c_tilde: f64, r: f64) -> Vec<f64> {
    let shift = c_tilde / r;
    k0.iter().map(|k| k + shift).collect()
}

/// Central differences (one-sided at the ends).
fn derivative(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|j| match j {
            0 => (values[1] - values[0]) / dx,
            j if j == n - 1 => (values[n - 1] - values[n - 2]) / dx,
            j => (values[j + 1] - values[j - 1]) / (2.0 * dx),
        })
        .collect()
}

/// `a(x) = −K(H + η(H))/2 + (r/2) K K' + K c̃ η'/(2η)`.
///
/// `η'/η` is taken as the derivative of `ln η` where the density is above the
/// floor and extrapolated elsewhere.
pub fn correction_drift_a(density: &DensityGrid1D, k: &[f64], h: &[f64], r: f64, c_tilde: f64) -> Result<Vec<f64>> {
    check_len("gain values", k, density.len())?;
    check_len("observation values", h, density.len())?;
    let h_mean = density.expectation(h);
    let dk = derivative(k, density.dx());
    let valid = density.valid_mask();
    let mut log_eta: Vec<f64> = density
        .eta()
        .iter()
        .zip(&valid)
        .map(|(e, ok)| if *ok { e.ln() } else { 0.0 })
        .collect();
    extrapolate_invalid(&mut log_eta, density.x(), &valid);
    let score = derivative(&log_eta, density.dx());
    Ok((0..density.len())
        .map(|j| -k[j] * (h[j] + h_mean) / 2.0 + 0.5 * r * k[j] * dk[j] + 0.5 * k[j] * c_tilde * score[j])
        .collect())
}

/// Largest per-cell defect of the discrete flux identity
/// `η_k K_k − η_j K_j = −∫_j^k (H − η(H)) r⁻¹ η`, with the integral taken by
/// the trapezoid rule.
pub fn flux_residual(density: &DensityGrid1D, k0: &[f64], h: &[f64], r: f64) -> Result<f64> {
    check_len("gain values", k0, density.len())?;
    check_len("observation values", h, density.len())?;
    let h_mean = density.expectation(h);
    let eta = density.eta();
    let src = |j: usize| (h[j] - h_mean) / r * eta[j];
    Ok((0..density.len() - 1)
        .map(|j| {
            let lhs = eta[j + 1] * k0[j + 1] - eta[j] * k0[j];
            let rhs = -0.5 * (src(j) + src(j + 1)) * density.dx();
            (lhs - rhs).abs()
        })
        .fold(0.0, f64::max))
}

/// All three fields for one density.
#[derive(Debug, Clone, PartialEq)]
pub struct GainFields {
    pub x: Vec<f64>,
    pub eta: Vec<f64>,
    pub k0: Vec<f64>,
    pub k_corr: Vec<f64>,
    pub a: Vec<f64>,
}

pub fn compute_gain_fields(density: &DensityGrid1D, h: &[f64], r: f64, c_tilde: f64) -> Result<GainFields> {
    let k0 = gain_k0(density, h, r)?;
    let k_corr = gain_correlated(&k0, c_tilde, r);
    let a = correction_drift_a(density, &k_corr, h, r, c_tilde)?;
    Ok(GainFields {
        x: density.x().to_vec(),
        eta: density.eta().to_vec(),
        k0,
        k_corr,
        a,
    })
}

impl GainFields {
    /// Writes `x, eta, k0, k_corr, a`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "eta", "k0", "k_corr", "a"]).map_err(io)?;
        for j in 0..self.x.len() {
            w.write_record([
                self.x[j].to_string(),
                self.eta[j].to_string(),
                self.k0[j].to_string(),
                self.k_corr[j].to_string(),
                self.a[j].to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
        Ok(())
    }
}
