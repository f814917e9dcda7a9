use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::FeatureExtractor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean and covariance of a set of feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample statistics of the rows of `x` (unbiased covariance).
pub fn covariance(x: &DMatrix<f64>) -> Result<FeatureStats> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 feature vectors, got {n}")));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok(FeatureStats { mean, cov })
}

/// Square root of a symmetric positive semi-definite matrix, clipping
/// negative eigenvalues to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the trace of the
/// product root taken as that of `(√Σ₁ Σ₂ √Σ₁)^{1/2}`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid("feature dimensions differ"));
    }
    let s1 = sqrt_psd(&a.cov);
    let inner = &s1 * &b.cov * &s1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::numeric("Fréchet distance is not finite"));
    }
    Ok(d.max(0.0))
}

fn feature_rows(map: &Tensor) -> DMatrix<f64> {
    let [_, c, h, w] = map.shape();
    DMatrix::from_fn(h * w, c, |i, ch| map.plane(0, ch)[i])
}

/// Single-image Fréchet distance between the spatial feature
/// distributions of two images.
pub fn sifid(real: &Tensor, fake: &Tensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let a = covariance(&feature_rows(&extractor.extract(real)?))?;
    let b = covariance(&feature_rows(&extractor.extract(fake)?))?;
    frechet_distance(&a, &b)
}
