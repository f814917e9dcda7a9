//! NIQE following the MATLAB recipe: MSCN coefficients, asymmetric
//! generalized-Gaussian fits on 96×96 blocks at two scales, and a
//! Mahalanobis-type distance to a natural-scene model.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FEATURES: usize = 36;
const GAUSS_SIGMA: f64 = 7.0 / 6.0;
const GAUSS_RADIUS: usize = 3;

/// Pristine natural-scene statistics.
#[derive(Clone, Debug, Deserialize)]
pub struct NssModel {
    pub patch_size: usize,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct NssFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: NssModel,
}

const BUILTIN: &str = include_str!("../../data/niqe_pristine.json");

impl NssModel {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: NssFile = serde_json::from_str(text)?;
        if f.format != "niqe-nss-model" {
            return Err(Error::invalid(format!("unexpected NSS model format `{}`", f.format)));
        }
        if f.version != 1 {
            return Err(Error::FormatVersion {
                found: f.version,
                expected: 1,
            });
        }
        let m = f.model;
        if m.mean.len() != FEATURES || m.covariance.len() != FEATURES || m.covariance.iter().any(|r| r.len() != FEATURES) {
            return Err(Error::invalid(format!("NSS model must be {FEATURES}-dimensional")));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        NssModel::from_json(&std::fs::read_to_string(path)?)
    }

    /// The model fit on the standard pristine image corpus.
    pub fn builtin() -> &'static NssModel {
        static MODEL: OnceLock<NssModel> = OnceLock::new();
        MODEL.get_or_init(|| NssModel::from_json(BUILTIN).expect("bundled NSS model parses"))
    }
}

/// Row-major grayscale plane.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

fn gaussian_window() -> Vec<f64> {
    let k = 2 * GAUSS_RADIUS + 1;
    let g: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - GAUSS_RADIUS as f64;
            (-d * d / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp()
        })
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// 2-D filtering with edge replication.
fn smooth(p: &Plane, win: &[f64]) -> Plane {
    let k = 2 * GAUSS_RADIUS + 1;
    let r = GAUSS_RADIUS as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = 0.0;
            for dy in 0..k {
                let sy = clamp(y as isize + dy as isize - r, p.h);
                for dx in 0..k {
                    let sx = clamp(x as isize + dx as isize - r, p.w);
                    acc += win[dy * k + dx] * p.at(sy, sx);
                }
            }
            out[y * p.w + x] = acc;
        }
    }
    Plane { h: p.h, w: p.w, v: out }
}

fn mscn(p: &Plane, win: &[f64]) -> Plane {
    let mu = smooth(p, win);
    let sq = Plane {
        h: p.h,
        w: p.w,
        v: p.v.iter().map(|v| v * v).collect(),
    };
    let mu_sq = smooth(&sq, win);
    let v = (0..p.v.len())
        .map(|i| {
            let sigma = (mu_sq.v[i] - mu.v[i] * mu.v[i]).abs().sqrt();
            (p.v[i] - mu.v[i]) / (sigma + 1.0)
        })
        .collect();
    Plane { h: p.h, w: p.w, v }
}

struct GammaTable {
    shapes: Vec<f64>,
    ratio: Vec<f64>,
}

fn gamma_table() -> &'static GammaTable {
    static TABLE: OnceLock<GammaTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let shapes: Vec<f64> = (0..9801).map(|i| 0.2 + i as f64 * 0.001).collect();
        let ratio = shapes
            .iter()
            .map(|&a| {
                let r = 1.0 / a;
                gamma(2.0 * r).powi(2) / (gamma(r) * gamma(3.0 * r))
            })
            .collect();
        GammaTable { shapes, ratio }
    })
}

/// Asymmetric generalized-Gaussian fit: `(shape, left scale, right scale)`.
fn aggd(values: &[f64]) -> (f64, f64, f64) {
    let (mut ls, mut ln, mut rs, mut rn, mut abs, mut sq) = (0.0, 0usize, 0.0, 0usize, 0.0, 0.0);
    for &v in values {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs += v.abs();
        sq += v * v;
    }
    let n = values.len() as f64;
    let left = (ls / ln as f64).sqrt();
    let right = (rs / rn as f64).sqrt();
    let g = left / right;
    let rhat = (abs / n).powi(2) / (sq / n);
    let rnorm = rhat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let t = gamma_table();
    let mut best = (f64::INFINITY, 0);
    for (i, r) in t.ratio.iter().enumerate() {
        let e = (r - rnorm).powi(2);
        if e < best.0 {
            best = (e, i);
        }
    }
    let alpha = if best.0.is_finite() { t.shapes[best.1] } else { f64::NAN };
    let f = (gamma(1.0 / alpha) / gamma(3.0 / alpha)).sqrt();
    (alpha, left * f, right * f)
}

fn block_features(p: &Plane, y0: usize, x0: usize, bh: usize, bw: usize) -> Vec<f64> {
    let block: Vec<f64> = (0..bh).flat_map(|y| (0..bw).map(move |x| (y, x))).map(|(y, x)| p.at(y0 + y, x0 + x)).collect();
    let (a, bl, br) = aggd(&block);
    let mut feat = vec![a, (bl + br) / 2.0];
    for (sy, sx) in [(0isize, 1isize), (1, 0), (1, 1), (1, -1)] {
        let prod: Vec<f64> = (0..bh)
            .flat_map(|y| (0..bw).map(move |x| (y, x)))
            .map(|(y, x)| {
                let yy = (y as isize - sy).rem_euclid(bh as isize) as usize;
                let xx = (x as isize - sx).rem_euclid(bw as isize) as usize;
                block[y * bw + x] * block[yy * bw + xx]
            })
            .collect();
        let (a, bl, br) = aggd(&prod);
        let mean = (br - bl) * gamma(2.0 / a) / gamma(1.0 / a);
        feat.extend([a, mean, bl, br]);
    }
    feat
}

fn cubic(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        1.5 * a.powi(3) - 2.5 * a * a + 1.0
    } else if a <= 2.0 {
        -0.5 * a.powi(3) + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// MATLAB-style antialiased bicubic halving along one axis: for each
/// output index, source indices (already mirrored) and weights.
fn half_weights(len: usize) -> (usize, Vec<Vec<(usize, f64)>>) {
    let scale = 0.5;
    let out = (len as f64 * scale).ceil() as usize;
    let width = 4.0 / scale;
    let taps = width.ceil() as usize + 2;
    let mirror = |i: isize| -> usize {
        let n = len as isize;
        let mut j = i;
        if j < 0 {
            j = -j - 1;
        }
        if j >= n {
            j = 2 * n - j - 1;
        }
        j.clamp(0, n - 1) as usize
    };
    let rows = (1..=out)
        .map(|x| {
            let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor();
            let mut w: Vec<(isize, f64)> = (0..taps)
                .map(|j| {
                    let idx = left + j as f64;
                    (idx as isize, scale * cubic((u - idx) * scale))
                })
                .collect();
            let s: f64 = w.iter().map(|p| p.1).sum();
            w.iter_mut().for_each(|p| p.1 /= s);
            w.into_iter().map(|(i, wt)| (mirror(i - 1), wt)).collect()
        })
        .collect();
    (out, rows)
}

fn halve(p: &Plane) -> Plane {
    let (oh, rh) = half_weights(p.h);
    let (ow, rw) = half_weights(p.w);
    let mut tmp = vec![0.0; oh * p.w];
    for (y, taps) in rh.iter().enumerate() {
        for x in 0..p.w {
            tmp[y * p.w + x] = taps.iter().map(|&(i, wt)| wt * p.at(i, x)).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (x, taps) in rw.iter().enumerate() {
            out[y * ow + x] = taps.iter().map(|&(i, wt)| wt * tmp[y * p.w + i]).sum();
        }
    }
    Plane { h: oh, w: ow, v: out }
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max = svd.singular_values.max();
    let cut = 1e-15 * max;
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let inv = svd.singular_values.map(|s| if s > cut { 1.0 / s } else { 0.0 });
    vt.transpose() * DMatrix::from_diagonal(&inv) * u.transpose()
}

/// NIQE of a luma plane with 8-bit values (`h × w`, row-major).
pub fn niqe_luma(luma: &[f64], h: usize, w: usize, model: &NssModel) -> Result<f64> {
    let b = model.patch_size;
    if luma.len() != h * w {
        return Err(Error::invalid("luma buffer does not match its dimensions"));
    }
    if h < b || w < b {
        return Err(Error::invalid(format!("NIQE needs at least {b}×{b} pixels, got {h}×{w}")));
    }
    let (nh, nw) = (h / b, w / b);
    let mut plane = Plane {
        h: nh * b,
        w: nw * b,
        v: (0..nh * b).flat_map(|y| luma[y * w..y * w + nw * b].iter().map(|v| v.round())).collect(),
    };
    let win = gaussian_window();
    let mut rows = vec![Vec::with_capacity(FEATURES); nh * nw];
    for scale in [1, 2] {
        let norm = mscn(&plane, &win);
        let (bh, bw) = (b / scale, b / scale);
        let mut i = 0;
        for bx in 0..nw {
            for by in 0..nh {
                rows[i].extend(block_features(&norm, by * bh, bx * bw, bh, bw));
                i += 1;
            }
        }
        if scale == 1 {
            plane = halve(&plane);
        }
    }
    let mut mean = DVector::zeros(FEATURES);
    for j in 0..FEATURES {
        let vals: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
        mean[j] = vals.iter().sum::<f64>() / vals.len() as f64;
    }
    let clean: Vec<&Vec<f64>> = rows.iter().filter(|r| r.iter().all(|v| !v.is_nan())).collect();
    if clean.len() < 2 || mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("too few usable NIQE blocks"));
    }
    let x = DMatrix::from_fn(clean.len(), FEATURES, |i, j| clean[i][j]);
    let cov = super::covariance(&x)?.cov;
    let pris_mean = DVector::from_column_slice(&model.mean);
    let pris_cov = DMatrix::from_fn(FEATURES, FEATURES, |i, j| model.covariance[i][j]);
    let inv = pinv(&((pris_cov + cov) / 2.0));
    let d = pris_mean - mean;
    let q = (d.transpose() * inv * &d)[(0, 0)];
    if !q.is_finite() {
        return Err(Error::numeric("NIQE distance is not finite"));
    }
    Ok(q.max(0.0).sqrt())
}

/// NIQE of a `[-1, 1]` image: single-channel images are used directly,
/// RGB images through their BT.601 luma.
pub fn niqe(image: &Tensor, model: &NssModel) -> Result<f64> {
    let [n, c, h, w] = image.shape();
    let to8 = |v: f64| (v.clamp(-1.0, 1.0) + 1.0) * 127.5;
    let luma: Vec<f64> = match (n, c) {
        (1, 1) => image.plane(0, 0).iter().map(|&v| to8(v)).collect(),
        (1, 3) => {
            let (r, g, b) = (image.plane(0, 0), image.plane(0, 1), image.plane(0, 2));
            (0..h * w)
                .map(|i| 16.0 + (65.481 * to8(r[i]) + 128.553 * to8(g[i]) + 24.966 * to8(b[i])) / 255.0)
                .collect()
        }
        _ => return Err(Error::invalid(format!("NIQE takes one gray or RGB image, got shape {:?}", image.shape()))),
    };
    niqe_luma(&luma, h, w, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_is_normalized_gaussian() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[3 * 7 + 3] - 0.11739635539001349).abs() < 1e-12);
    }

    #[test]
    fn halving_preserves_constants_and_sizes() {
        let p = Plane {
            h: 7,
            w: 10,
            v: vec![3.5; 70],
        };
        let q = halve(&p);
        assert_eq!((q.h, q.w), (4, 5));
        assert!(q.v.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn aggd_recovers_symmetric_gaussian_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..200_000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let (a, l, r) = aggd(&v);
        assert!((a - 2.0).abs() < 0.05, "{a}");
        let s = std::f64::consts::SQRT_2;
        assert!((l - s).abs() < 0.03 && (r - s).abs() < 0.03, "{l} {r}");
    }

    #[test]
    fn small_and_malformed_inputs_fail() {
        let m = NssModel::builtin();
        assert!(niqe(&Tensor::zeros([1, 3, 95, 200]), m).is_err());
        assert!(niqe(&Tensor::zeros([1, 2, 100, 100]), m).is_err());
        assert!(NssModel::from_json(r#"{"format":"x","version":1,"patch_size":96,"mean":[],"covariance":[]}"#).is_err());
    }
}
