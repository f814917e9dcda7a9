//! Image-quality metrics: RMSE, SIFID and NIQE, plus a directory-level
//! evaluation table.

mod extract;
mod frechet;
mod niqe;
mod table;

pub use extract::{default_extractor, FeatureExtractor, InceptionStem, RandomProjection, INCEPTION_WEIGHTS_ENV};
pub use frechet::{covariance, frechet_distance, sifid, sqrt_psd, FeatureStats};
pub use niqe::{niqe, niqe_luma, NssModel};
pub use table::{evaluate_table, EvalReport, EvalRow, Metric};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Root of the mean squared difference, in the tensors' own units.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("rmse needs equal shapes, got {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::invalid("rmse of empty images"));
    }
    let ss: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// RMSE of two `[-1, 1]` images measured on the 8-bit `[0, 255]` scale.
pub fn rmse_8bit(a: &Tensor, b: &Tensor) -> Result<f64> {
    let to255 = |t: &Tensor| t.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 127.5);
    rmse(&to255(a), &to255(b))
}
