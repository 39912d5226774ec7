//! Gaussian fits of feature sets and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Eigenvalues below this are reported before being clipped to zero.
const NEGATIVE_EIGEN_WARN: f64 = -1e-10;
const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 100_000;

/// Sample mean and unbiased covariance (row-major `F×F`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Two-pass fit: mean first, then centered outer products over `n − 1`.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats, MetricsError> {
    let n = features.len();
    if n < 2 {
        return Err(MetricsError::Empty(format!("a Gaussian fit needs at least 2 samples, got {n}")));
    }
    let f = features[0].len();
    if let Some(bad) = features.iter().find(|r| r.len() != f) {
        return Err(MetricsError::Dimension { expected: f, got: bad.len() });
    }
    let x = DMatrix::from_fn(n, f, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean: mean.iter().copied().collect(), cov: cov.transpose().iter().copied().collect(), count: n })
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricsError> {
    SymmetricEigen::try_new(m, EIGEN_EPS, EIGEN_MAX_ITER).ok_or(MetricsError::Eigen)
}

/// Eigenvalues with negatives and rounding-level positives set to zero, so
/// null directions contribute nothing after a square root.
fn clipped(values: &DVector<f64>) -> DVector<f64> {
    let worst = values.iter().copied().fold(f64::INFINITY, f64::min);
    if worst < NEGATIVE_EIGEN_WARN {
        log::warn!("clipping eigenvalue {worst:e} of a covariance to zero");
    }
    let top = values.iter().copied().fold(0.0, f64::max);
    let floor = top * values.len() as f64 * f64::EPSILON;
    values.map(|v| if v > floor { v } else { 0.0 })
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let e = eigen((m + m.transpose()) * 0.5)?;
    let d = DMatrix::from_diagonal(&clipped(&e.eigenvalues).map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁^{½} Σ₂ Σ₁^{½})^{½})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension { expected: a.dim(), got: b.dim() });
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    // Tr((Σ₁^{½} Σ₂ Σ₁^{½})^{½}) is the nuclear norm of Σ₂^{½} Σ₁^{½}; its
    // singular values carry O(ε‖Σ‖) error where the eigenvalues of the
    // product, square-rooted, carry O(√ε ‖Σ‖)
    let product = psd_sqrt(&sb)? * psd_sqrt(&sa)?;
    let svd = SVD::try_new(product, false, false, EIGEN_EPS, EIGEN_MAX_ITER).ok_or(MetricsError::Eigen)?;
    let cross: f64 = svd.singular_values.iter().sum();
    Ok(mean_term + sa.trace() + sb.trace() - 2.0 * cross)
}
