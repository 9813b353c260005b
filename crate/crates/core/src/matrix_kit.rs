//! Dense symmetric linear algebra shared by every filter.
//!
//! Everything here is a pure function on immutable inputs. Reductions over
//! ensemble members use a fixed pairwise order so results never depend on
//! how callers schedule work.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance on `|a_ij - a_ji|` accepted as "symmetric".
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues above `-PSD_TOL * (1 + λ_max)` are accepted as nonnegative.
pub const PSD_TOL: f64 = 1e-10;

/// A symmetric positive semidefinite matrix.
///
/// Construction symmetrizes the input, so the stored entries are exactly
/// symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsdMatrix(DMatrix<f64>);

impl SpsdMatrix {
    /// Validates symmetry and semidefiniteness within [`SYMMETRY_TOL`] and
    /// [`PSD_TOL`].
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&a)?;
        let s = symmetrize(&a);
        let lambda = eigenvalues_sym(&s);
        let lmax = lambda.iter().cloned().fold(0.0_f64, f64::max);
        let lmin = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
        if lmin < -PSD_TOL * (1.0 + lmax) {
            return Err(Error::Contract(format!(
                "matrix is not positive semidefinite (λ_min = {lmin:e})"
            )));
        }
        Ok(SpsdMatrix(s))
    }

    /// Wraps a matrix the caller knows to be symmetric and semidefinite
    /// (e.g. a Gram matrix). Only symmetrizes.
    pub fn from_gram(a: DMatrix<f64>) -> Self {
        debug_assert!(a.is_square());
        SpsdMatrix(symmetrize(&a))
    }

    pub fn zeros(dim: usize) -> Self {
        SpsdMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        SpsdMatrix(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Smallest eigenvalue (may be slightly negative from round-off).
    pub fn lambda_min(&self) -> f64 {
        eigenvalues_sym(&self.0)
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn lambda_max(&self) -> f64 {
        eigenvalues_sym(&self.0)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn spectral(&self) -> SpectralDecomposition {
        spectral_of_symmetric(&self.0)
    }

    /// A square root `S` with `S Sᵀ = self`, built from the spectral
    /// decomposition so rank-deficient inputs are fine.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        let sd = self.spectral();
        let mut s = sd.q.clone();
        for (j, l) in sd.lambda.iter().enumerate() {
            let root = l.max(0.0).sqrt();
            s.column_mut(j).scale_mut(root);
        }
        s
    }
}

/// Orthogonal eigendecomposition `A = Q diag(λ) Qᵀ` with the eigenvectors in
/// the columns of `q` and `lambda` sorted in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub q: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

impl SpectralDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.q.clone();
        for (j, l) in self.lambda.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*l);
        }
        symmetrize(&(scaled * self.q.transpose()))
    }
}

/// How `P⁺` is formed from an spsd `P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InverseStrategy {
    /// Eigenvalues `≤ rel_tol · λ_max` are treated as zero.
    MoorePenrose { rel_tol: f64 },
    /// `(Pⁿ + εI)⁻¹ Pⁿ⁻¹`, Lipschitz in `P`.
    Regularized { epsilon: f64, n: u32 },
}

impl InverseStrategy {
    /// Moore–Penrose with the default relative cut-off `dim · 1e-14`.
    pub fn default_for_dim(dim: usize) -> Self {
        InverseStrategy::MoorePenrose {
            rel_tol: dim.max(1) as f64 * 1e-14,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            InverseStrategy::MoorePenrose { rel_tol } => {
                if !(rel_tol > 0.0 && rel_tol < 1.0) {
                    return Err(Error::Validation(format!(
                        "Moore-Penrose rel_tol must lie in (0, 1), got {rel_tol}"
                    )));
                }
            }
            InverseStrategy::Regularized { epsilon, n } => {
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::Validation(format!(
                        "regularization epsilon must be positive, got {epsilon}"
                    )));
                }
                if n == 0 {
                    return Err(Error::Validation("regularization power n must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// `(A + Aᵀ) / 2`.
pub fn sym(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::dim(
            "sym",
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    Ok(symmetrize(a))
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::dim(
            "symmetric matrix",
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("matrix has non-finite entries".into()));
    }
    let scale = 1.0 + a.amax();
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (a[(i, j)] - a[(j, i)]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::Contract(format!(
                    "matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {gap:e}"
                )));
            }
        }
    }
    Ok(())
}

/// Spectral decomposition of a symmetric matrix.
///
/// The input is symmetrized before decomposing. Fails if it is not square or
/// is asymmetric beyond [`SYMMETRY_TOL`].
pub fn eig_sym(a: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    check_symmetric(a)?;
    Ok(spectral_of_symmetric(&symmetrize(a)))
}

fn spectral_of_symmetric(s: &DMatrix<f64>) -> SpectralDecomposition {
    let n = s.nrows();
    if n == 0 {
        return SpectralDecomposition {
            q: DMatrix::zeros(0, 0),
            lambda: DVector::zeros(0),
        };
    }
    let eig = SymmetricEigen::new(s.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut q = DMatrix::zeros(n, n);
    let mut lambda = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        lambda[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        // fix the sign: largest-magnitude component positive
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        q.set_column(dst, &col);
    }
    SpectralDecomposition { q, lambda }
}

/// Eigenvalues of a symmetric matrix, unordered.
pub(crate) fn eigenvalues_sym(s: &DMatrix<f64>) -> DVector<f64> {
    match s.nrows() {
        0 => DVector::zeros(0),
        1 => DVector::from_element(1, s[(0, 0)]),
        _ => s.clone().symmetric_eigenvalues(),
    }
}

/// Smallest eigenvalue of a symmetric matrix (symmetrized first).
pub fn lambda_min_sym(a: &DMatrix<f64>) -> f64 {
    eigenvalues_sym(&symmetrize(a))
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix (symmetrized first).
pub fn lambda_max_sym(a: &DMatrix<f64>) -> f64 {
    eigenvalues_sym(&symmetrize(a))
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Frobenius norm `sqrt(tr(A Aᵀ))`.
pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Result of a Moore–Penrose inversion together with the numerical rank.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    /// True when some eigenvalue fell at or below the cut-off.
    pub rank_deficient: bool,
}

/// `P⁺` under the chosen strategy.
pub fn pseudo_inverse(p: &SpsdMatrix, strategy: InverseStrategy) -> DMatrix<f64> {
    match strategy {
        InverseStrategy::MoorePenrose { rel_tol } => moore_penrose(p, rel_tol).matrix,
        InverseStrategy::Regularized { epsilon, n } => regularized_inverse(p, epsilon, n),
    }
}

/// Moore–Penrose inverse with relative eigenvalue cut-off.
pub fn moore_penrose(p: &SpsdMatrix, rel_tol: f64) -> PseudoInverse {
    let d = p.dim();
    let sd = p.spectral();
    let lmax = sd.lambda.iter().cloned().fold(0.0_f64, f64::max);
    let cut = rel_tol * lmax;
    let mut scaled = DMatrix::zeros(d, d);
    let mut rank = 0;
    for j in 0..d {
        let l = sd.lambda[j];
        if lmax > 0.0 && l > cut {
            rank += 1;
            scaled.set_column(j, &(sd.q.column(j) / l));
        }
    }
    let matrix = symmetrize(&(scaled * sd.q.transpose()));
    PseudoInverse {
        matrix,
        rank,
        rank_deficient: rank < d,
    }
}

/// `(Pⁿ + εI)⁻¹ Pⁿ⁻¹` via repeated products and a Cholesky solve.
fn regularized_inverse(p: &SpsdMatrix, epsilon: f64, n: u32) -> DMatrix<f64> {
    let d = p.dim();
    let pm = p.as_matrix();
    let mut pow_prev = DMatrix::identity(d, d);
    for _ in 1..n {
        pow_prev = symmetrize(&(&pow_prev * pm));
    }
    let pow_n = symmetrize(&(&pow_prev * pm));
    let shifted = pow_n + DMatrix::identity(d, d) * epsilon;
    let out = match shifted.clone().cholesky() {
        Some(ch) => ch.solve(&pow_prev),
        // εI keeps the shift spd, so this only triggers on severe round-off
        None => shifted
            .lu()
            .solve(&pow_prev)
            .unwrap_or_else(|| DMatrix::zeros(d, d)),
    };
    symmetrize(&out)
}

/// Sum of `f(0..n)` in a fixed pairwise order.
pub fn pairwise_sum<F: Fn(usize) -> f64>(n: usize, f: &F) -> f64 {
    fn rec<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
        if hi - lo <= 8 {
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            s
        } else {
            let mid = lo + (hi - lo) / 2;
            rec(lo, mid, f) + rec(mid, hi, f)
        }
    }
    rec(0, n, f)
}

/// Ensemble mean and unbiased (`M-1`) covariance of the columns.
pub fn empirical_moments(particles: &DMatrix<f64>) -> Result<(DVector<f64>, SpsdMatrix)> {
    let (d, m) = particles.shape();
    if m < 2 {
        return Err(Error::InsufficientEnsemble { m });
    }
    let mean = column_mean(particles);
    let mut cov = DMatrix::zeros(d, d);
    let denom = (m - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let s = pairwise_sum(m, &|i| {
                (particles[(a, i)] - mean[a]) * (particles[(b, i)] - mean[b])
            }) / denom;
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    Ok((mean, SpsdMatrix(cov)))
}

/// Column average with pairwise summation.
pub fn column_mean(particles: &DMatrix<f64>) -> DVector<f64> {
    let (d, m) = particles.shape();
    DVector::from_fn(d, |a, _| pairwise_sum(m, &|i| particles[(a, i)]) / m as f64)
}

/// Symmetrized empirical cross covariance
/// `(1/(M-1)) Σ [(fⁱ - f̄)(xⁱ - x̄)ᵀ + (xⁱ - x̄)(fⁱ - f̄)ᵀ]`.
pub fn cross_cov_sym(f_values: &DMatrix<f64>, x_values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f_values.shape() != x_values.shape() {
        return Err(Error::dim(
            "cross_cov_sym",
            format!("{:?}", x_values.shape()),
            format!("{:?}", f_values.shape()),
        ));
    }
    let (d, m) = x_values.shape();
    if m < 2 {
        return Err(Error::InsufficientEnsemble { m });
    }
    let fbar = column_mean(f_values);
    let xbar = column_mean(x_values);
    let denom = (m - 1) as f64;
    let half = DMatrix::from_fn(d, d, |a, b| {
        pairwise_sum(m, &|i| (f_values[(a, i)] - fbar[a]) * (x_values[(b, i)] - xbar[b])) / denom
    });
    let t = half.transpose();
    Ok(&half + &t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn m2(a: [[f64; 2]; 2]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]])
    }

    #[test]
    fn sym_examples() {
        assert_eq!(sym(&m2([[0.0, 2.0], [0.0, 0.0]])).unwrap(), m2([[0.0, 1.0], [1.0, 0.0]]));
        assert_eq!(sym(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(sym(&m2([[1.0, 3.0], [1.0, 1.0]])).unwrap(), m2([[1.0, 2.0], [2.0, 1.0]]));
        assert!(matches!(sym(&DMatrix::zeros(2, 3)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn eig_sym_examples() {
        let sd = eig_sym(&m2([[3.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(sd.lambda.as_slice(), &[3.0, 1.0]);
        assert!((sd.q.clone() - DMatrix::identity(2, 2)).amax() < 1e-14);

        let sd = eig_sym(&m2([[1.0, 1.0], [1.0, 1.0]])).unwrap();
        assert!(close(sd.lambda[0], 2.0, 1e-14));
        assert!(close(sd.lambda[1], 0.0, 1e-14));

        let sd = eig_sym(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(sd.lambda.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn eig_sym_rejects_asymmetric() {
        let err = eig_sym(&m2([[1.0, 0.5], [0.0, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn spsd_rejects_indefinite() {
        assert!(SpsdMatrix::new(m2([[1.0, 0.0], [0.0, -1.0]])).is_err());
        assert!(SpsdMatrix::new(m2([[1.0, 0.0], [0.0, -1e-12]])).is_ok());
    }

    #[test]
    fn pseudo_inverse_examples() {
        let p = SpsdMatrix::from_diagonal(&[2.0, 0.0]).unwrap();
        let pi = pseudo_inverse(&p, InverseStrategy::MoorePenrose { rel_tol: 1e-12 });
        assert!((pi - m2([[0.5, 0.0], [0.0, 0.0]])).amax() < 1e-15);

        let p = SpsdMatrix::new(m2([[1.0, 1.0], [1.0, 1.0]])).unwrap();
        let pi = pseudo_inverse(&p, InverseStrategy::MoorePenrose { rel_tol: 1e-12 });
        assert!((pi - m2([[0.25, 0.25], [0.25, 0.25]])).amax() < 1e-14);

        let p = SpsdMatrix::from_diagonal(&[1.0]).unwrap();
        let pi = pseudo_inverse(&p, InverseStrategy::Regularized { epsilon: 1.0, n: 1 });
        assert!(close(pi[(0, 0)], 0.5, 1e-15));
    }

    #[test]
    fn zero_matrix_pseudo_inverse_is_zero() {
        let p = SpsdMatrix::zeros(3);
        let mp = moore_penrose(&p, 1e-12);
        assert_eq!(mp.rank, 0);
        assert!(mp.rank_deficient);
        assert_eq!(mp.matrix, DMatrix::zeros(3, 3));
    }

    #[test]
    fn strategy_validation() {
        assert!(InverseStrategy::MoorePenrose { rel_tol: 0.0 }.validate().is_err());
        assert!(InverseStrategy::MoorePenrose { rel_tol: 1.0 }.validate().is_err());
        assert!(InverseStrategy::Regularized { epsilon: 0.0, n: 1 }.validate().is_err());
        assert!(InverseStrategy::Regularized { epsilon: 1e-3, n: 0 }.validate().is_err());
        assert!(InverseStrategy::default_for_dim(4).validate().is_ok());
    }

    #[test]
    fn empirical_moments_examples() {
        let (m, c) = empirical_moments(&DMatrix::from_row_slice(1, 2, &[0.0, 2.0])).unwrap();
        assert_eq!(m[0], 1.0);
        assert_eq!(c.as_matrix()[(0, 0)], 2.0);

        let (_, c) = empirical_moments(&DMatrix::from_element(2, 5, 0.7)).unwrap();
        assert_eq!(c.as_matrix(), &DMatrix::zeros(2, 2));

        let (m, c) = empirical_moments(&DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 1.0])).unwrap();
        assert_eq!(m[0], 0.0);
        assert_eq!(c.as_matrix()[(0, 0)], 1.0);

        assert_eq!(
            empirical_moments(&DMatrix::zeros(2, 1)).unwrap_err(),
            Error::InsufficientEnsemble { m: 1 }
        );
    }

    #[test]
    fn cross_cov_examples() {
        let x = DMatrix::from_row_slice(2, 4, &[0.0, 1.0, 3.0, -2.0, 1.0, 1.5, 0.0, 4.0]);
        let (_, c) = empirical_moments(&x).unwrap();
        let cc = cross_cov_sym(&x, &x).unwrap();
        assert!((cc - c.as_matrix() * 2.0).amax() < 1e-14);

        let f = DMatrix::from_element(2, 4, 3.0);
        assert_eq!(cross_cov_sym(&f, &x).unwrap(), DMatrix::zeros(2, 2));

        let x = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let f = DMatrix::from_row_slice(1, 2, &[0.0, 4.0]);
        assert_eq!(cross_cov_sym(&f, &x).unwrap()[(0, 0)], 8.0);

        assert!(cross_cov_sym(&DMatrix::zeros(2, 3), &DMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        for n in [0, 1, 7, 8, 9, 100, 1023] {
            let s = pairwise_sum(n, &|i| i as f64);
            assert_eq!(s, (n * n.saturating_sub(1) / 2) as f64);
        }
    }

    #[test]
    fn sqrt_factor_reconstructs() {
        let p = SpsdMatrix::new(m2([[2.0, 1.0], [1.0, 2.0]])).unwrap();
        let s = p.sqrt_factor();
        assert!((&s * s.transpose() - p.as_matrix()).amax() < 1e-14);
    }
}
