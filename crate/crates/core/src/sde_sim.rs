//! Truth signal and observation path generation on a uniform grid.
//!
//! The `ΔV` increment drawn at each step enters both the signal (through
//! `C̃`) and the observation (through `Γ`); it is never resampled.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrix_kit::SpsdMatrix;
use crate::model::ModelSpec;
use crate::noise::{self, NoiseStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::Validation(format!("t_end must be positive, got {t_end}")));
        }
        if n_steps == 0 {
            return Err(Error::Validation("n_steps must be positive".into()));
        }
        Ok(TimeGrid { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Time of grid point `k` (0 ≤ k ≤ n_steps).
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            k as f64 * self.t_end / self.n_steps as f64
        }
    }

    /// All `n_steps + 1` grid times.
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.time(k))
    }
}

/// Law of `X_0`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Fixed(DVector<f64>),
    Gaussian { mean: DVector<f64>, cov: SpsdMatrix },
}

impl InitialCondition {
    pub fn gaussian(mean: DVector<f64>, cov: SpsdMatrix) -> Result<Self> {
        if cov.dim() != mean.len() {
            return Err(Error::dim("initial covariance", mean.len(), cov.dim()));
        }
        Ok(InitialCondition::Gaussian { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean().len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        match self {
            InitialCondition::Fixed(x) => x,
            InitialCondition::Gaussian { mean, .. } => mean,
        }
    }

    pub fn cov(&self) -> SpsdMatrix {
        match self {
            InitialCondition::Fixed(x) => SpsdMatrix::zeros(x.len()),
            InitialCondition::Gaussian { cov, .. } => cov.clone(),
        }
    }

    pub fn sample(&self, stream: &mut NoiseStream) -> DVector<f64> {
        match self {
            InitialCondition::Fixed(x) => x.clone(),
            InitialCondition::Gaussian { mean, cov } => {
                let z = stream.standard_normals(mean.len());
                mean + cov.sqrt_factor() * z
            }
        }
    }

    /// `M` initial particles, particle `i` drawn from its own reserved stream.
    pub fn sample_ensemble(&self, seed: u64, m: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, m);
        let root = match self {
            InitialCondition::Fixed(_) => None,
            InitialCondition::Gaussian { cov, .. } => Some(cov.sqrt_factor()),
        };
        for i in 0..m {
            let x = match &root {
                None => self.mean().clone(),
                Some(s) => {
                    let mut stream = NoiseStream::new(seed, noise::particle_init(i));
                    self.mean() + s * stream.standard_normals(d)
                }
            };
            out.set_column(i, &x);
        }
        out
    }
}

/// Realized truth path and observation increments.
///
/// `delta_y` row `k` is the increment over `[t_k, t_{k+1})`; `truth_path` row
/// `k` is `X_{t_k}`. `Y_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub grid: TimeGrid,
    pub delta_y: DMatrix<f64>,
    pub truth_path: DMatrix<f64>,
    pub seed: u64,
}

impl ObservationRecord {
    pub fn d_x(&self) -> usize {
        self.truth_path.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.delta_y.ncols()
    }

    /// `ΔY_k` as a column vector.
    pub fn dy(&self, k: usize) -> DVector<f64> {
        self.delta_y.row(k).transpose()
    }

    pub fn truth(&self, k: usize) -> DVector<f64> {
        self.truth_path.row(k).transpose()
    }

    /// Observation path `Y_{t_k}`, `k = 0..=n_steps`, by sequential summation.
    pub fn y_path(&self) -> DMatrix<f64> {
        let n = self.grid.n_steps();
        let mut y = DMatrix::zeros(n + 1, self.d_y());
        for k in 0..n {
            for j in 0..self.d_y() {
                y[(k + 1, j)] = y[(k, j)] + self.delta_y[(k, j)];
            }
        }
        y
    }

    /// Writes `t, x_1..x_dx, dy_1..dy_dy`. Row `k` carries the increment
    /// over `(t_{k-1}, t_k]`; row 0 carries zeros.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.d_x()).map(|i| format!("x_{i}")));
        header.extend((1..=self.d_y()).map(|i| format!("dy_{i}")));
        w.write_record(&header).map_err(io)?;
        for k in 0..=self.grid.n_steps() {
            let mut row = vec![self.grid.time(k).to_string()];
            row.extend(self.truth_path.row(k).iter().map(|v| v.to_string()));
            if k == 0 {
                row.extend((0..self.d_y()).map(|_| 0.0f64.to_string()));
            } else {
                row.extend(self.delta_y.row(k - 1).iter().map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
        Ok(())
    }

    /// Parses the layout written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(reader: R, seed: u64) -> Result<Self> {
        let bad = |msg: String| Error::Validation(format!("observation csv: {msg}"));
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.get(0) != Some("t") {
            return Err(bad("first column must be `t`".into()));
        }
        let d_x = header.iter().skip(1).take_while(|h| h.starts_with("x_")).count();
        let d_y = header.len() - 1 - d_x;
        if d_x == 0 || d_y == 0 {
            return Err(bad("need at least one x_ and one dy_ column".into()));
        }
        for (i, h) in header.iter().skip(1).enumerate() {
            let expected = if i < d_x { format!("x_{}", i + 1) } else { format!("dy_{}", i - d_x + 1) };
            if h != expected {
                return Err(bad(format!("unexpected column `{h}`, expected `{expected}`")));
            }
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != header.len() {
                return Err(bad(format!("row {} has {} fields", rows.len(), rec.len())));
            }
            let row = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad(format!("invalid number `{s}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.len() < 2 {
            return Err(bad("need at least two rows".into()));
        }
        let n_steps = rows.len() - 1;
        if rows[0][0] != 0.0 || rows[0][1 + d_x..].iter().any(|v| *v != 0.0) {
            return Err(bad("first row must have t = 0 and zero increments".into()));
        }
        let t_end = rows[n_steps][0];
        let grid = TimeGrid::new(t_end, n_steps).map_err(|e| bad(e.to_string()))?;
        for (k, row) in rows.iter().enumerate() {
            let t = grid.time(k);
            if (row[0] - t).abs() > 1e-9 * (1.0 + t_end) {
                return Err(bad(format!("time grid is not uniform at row {k}")));
            }
        }
        let truth_path = DMatrix::from_fn(n_steps + 1, d_x, |k, j| rows[k][1 + j]);
        let delta_y = DMatrix::from_fn(n_steps, d_y, |k, j| rows[k + 1][1 + d_x + j]);
        Ok(ObservationRecord {
            grid,
            delta_y,
            truth_path,
            seed,
        })
    }
}

/// Euler–Maruyama truth path and observation increments
/// `ΔY_k = h(t_k, X_k) dt + Γ_k ΔV_k`, sharing `ΔV_k` with the signal.
pub fn simulate_truth_and_obs(
    model: &ModelSpec,
    grid: &TimeGrid,
    x0: &InitialCondition,
    seed: u64,
) -> Result<ObservationRecord> {
    let (d_x, d_w, d_v, d_y) = (model.d_x(), model.d_w(), model.d_v(), model.d_y());
    if x0.dim() != d_x {
        return Err(Error::dim("initial condition", d_x, x0.dim()));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut x = x0.sample(&mut NoiseStream::new(seed, noise::TRUTH_X0));
    let mut w_stream = NoiseStream::new(seed, noise::TRUTH_W);
    let mut v_stream = NoiseStream::new(seed, noise::TRUTH_V);
    let mut truth_path = DMatrix::zeros(n + 1, d_x);
    let mut delta_y = DMatrix::zeros(n, d_y);
    truth_path.set_row(0, &x.transpose());
    for k in 0..n {
        let t = grid.time(k);
        let dw = w_stream.increments(d_w, dt);
        let dv = v_stream.increments(d_v, dt);
        let dy = model.truth_observation(t, &x) * dt + model.obs_gamma(t) * &dv;
        let dx = model.drift(t, &x) * dt + model.diffusion(t, &x) * dw + model.c_tilde(t) * &dv;
        x += dx;
        if x.iter().chain(dy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Explosion { step: k });
        }
        delta_y.set_row(k, &dy.transpose());
        truth_path.set_row(k + 1, &x.transpose());
    }
    Ok(ObservationRecord {
        grid: *grid,
        delta_y,
        truth_path,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModelSpec;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 100).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.times().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn deterministic_degenerate_path() {
        let model = LinearModelSpec::time_invariant(s(0.0), s(0.0), s(0.0), s(1.0), s(0.0)).unwrap();
        let rec = simulate_truth_and_obs(
            &model,
            &grid(),
            &InitialCondition::Fixed(DVector::from_element(1, 1.0)),
            9,
        )
        .unwrap();
        assert!(rec.truth_path.iter().all(|v| *v == 1.0));
        assert!(rec.delta_y.iter().all(|v| *v == grid().dt()));
    }

    #[test]
    fn noise_free_observation_is_functional_of_truth() {
        let model = LinearModelSpec::time_invariant(s(-0.5), s(1.0), s(1.0), s(2.0), s(0.0)).unwrap();
        let x0 = InitialCondition::Fixed(DVector::from_element(1, 0.3));
        let rec = simulate_truth_and_obs(&model, &grid(), &x0, 11).unwrap();
        for k in 0..grid().n_steps() {
            assert_eq!(rec.delta_y[(k, 0)], 2.0 * rec.truth_path[(k, 0)] * grid().dt());
        }
    }

    #[test]
    fn shared_v_stream_gives_identical_paths() {
        let model = LinearModelSpec::time_invariant(s(0.0), s(0.0), s(1.0), s(0.0), s(1.0)).unwrap();
        let rec = simulate_truth_and_obs(
            &model,
            &grid(),
            &InitialCondition::Fixed(DVector::zeros(1)),
            42,
        )
        .unwrap();
        let y = rec.y_path();
        let n = grid().n_steps();
        for k in 0..=n {
            assert_eq!(rec.truth_path[(k, 0)].to_bits(), y[(k, 0)].to_bits());
        }
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let model = LinearModelSpec::time_invariant(s(-1.0), s(1.0), s(0.5), s(1.0), s(2.0)).unwrap();
        let x0 = InitialCondition::gaussian(DVector::zeros(1), SpsdMatrix::identity(1)).unwrap();
        let a = simulate_truth_and_obs(&model, &grid(), &x0, 5).unwrap();
        let b = simulate_truth_and_obs(&model, &grid(), &x0, 5).unwrap();
        assert_eq!(a, b);
        let c = simulate_truth_and_obs(&model, &grid(), &x0, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn explosion_is_reported_with_step() {
        let model = LinearModelSpec::time_invariant(s(1e200), s(0.0), s(0.0), s(1.0), s(1.0)).unwrap();
        let err = simulate_truth_and_obs(
            &model,
            &grid(),
            &InitialCondition::Fixed(DVector::from_element(1, 1.0)),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Explosion { step } if step < 5));
    }

    #[test]
    fn csv_round_trip() {
        let model = LinearModelSpec::time_invariant(
            -DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 2f64.sqrt(),
        )
        .unwrap();
        let x0 = InitialCondition::gaussian(DVector::zeros(2), SpsdMatrix::identity(2)).unwrap();
        let rec = simulate_truth_and_obs(&model, &TimeGrid::new(0.5, 17).unwrap(), &x0, 3).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x_1,x_2,dy_1,dy_2\n"));
        let back = ObservationRecord::read_csv(buf.as_slice(), 3).unwrap();
        assert_eq!(back.truth_path, rec.truth_path);
        assert_eq!(back.delta_y, rec.delta_y);
        assert_eq!(back.grid.n_steps(), 17);
    }

    #[test]
    fn csv_reader_rejects_garbage() {
        for text in [
            "",
            "t\n0\n",
            "t,x_1,dy_1\n0,1,0\n",
            "t,x_1,dy_1\n0,1,0.5\n1,1,1\n",
            "t,x_2,dy_1\n0,1,0\n1,1,1\n",
            "t,x_1,dy_1\n0,1,0\n1,nan,1\n",
            "t,x_1,dy_1\n0,1,0\n1,1\n",
            "t,x_1,dy_1\n0,1,0\n0.3,1,1\n1,1,1\n",
        ] {
            assert!(ObservationRecord::read_csv(text.as_bytes(), 0).is_err(), "{text:?}");
        }
    }
}
