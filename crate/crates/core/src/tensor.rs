//! Dense channel-first `f64` tensors.
//!
//! Every tensor is rank 4 (`[batch, channels, height, width]`). Scalars are
//! `[1, 1, 1, 1]`, per-channel vectors are `[1, C, 1, 1]` and convolution
//! kernels are `[out, in, k, k]`, so one layout covers everything the
//! networks need.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Shape = [usize; 4];

pub const SCALAR: Shape = [1, 1, 1, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(SCALAR, value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Contiguous `height * width` plane for one (sample, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {shape:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of shape and little-endian data bytes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.hash_into(&mut hasher);
        hex::encode(hasher.finalize())
    }

    pub(crate) fn hash_into(&self, hasher: &mut Sha256) {
        for d in self.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
    }
}

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Result shape of broadcasting `a` against `b` (each axis equal or 1).
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::invalid(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

fn strides_for(shape: Shape, out: Shape) -> [usize; 4] {
    let dense = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { dense[i] };
    }
    s
}

/// Broadcasting elementwise binary operation.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape, b.shape)?;
    let sa = strides_for(a.shape, out);
    let sb = strides_for(b.shape, out);
    let mut data = Vec::with_capacity(numel(out));
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let ba = n * sa[0] + c * sa[1] + y * sa[2];
                let bb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    data.push(f(a.data[ba + x * sa[3]], b.data[bb + x * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor { shape: out, data })
}

/// Expand `a` to `shape` by repeating along its unit axes.
pub fn broadcast_to(a: &Tensor, shape: Shape) -> Result<Tensor> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    if broadcast_shape(a.shape, shape)? != shape {
        return Err(Error::invalid(format!(
            "cannot broadcast {:?} to {shape:?}",
            a.shape
        )));
    }
    broadcast_zip(a, &Tensor::zeros(shape), |x, _| x)
}

/// Sum `a` over the axes where `shape` has extent 1; the adjoint of
/// [`broadcast_to`].
pub fn sum_to(a: &Tensor, shape: Shape) -> Result<Tensor> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    if broadcast_shape(shape, a.shape)? != a.shape {
        return Err(Error::invalid(format!(
            "cannot reduce {:?} to {shape:?}",
            a.shape
        )));
    }
    let mut out = Tensor::zeros(shape);
    let so = strides_for(shape, a.shape);
    let [nn, cc, hh, ww] = a.shape;
    let mut i = 0;
    for n in 0..nn {
        for c in 0..cc {
            for y in 0..hh {
                let base = n * so[0] + c * so[1] + y * so[2];
                for x in 0..ww {
                    out.data[base + x * so[3]] += a.data[i];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_per_channel() {
        let x = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec([1, 2, 1, 1], vec![10.0, 20.0]).unwrap();
        let y = broadcast_zip(&x, &b, |a, b| a + b).unwrap();
        assert_eq!(y.data(), &[11.0, 12.0, 23.0, 24.0]);
        let back = sum_to(&y, [1, 2, 1, 1]).unwrap();
        assert_eq!(back.data(), &[23.0, 47.0]);
    }

    #[test]
    fn broadcast_rejects_mismatch() {
        let a = Tensor::zeros([1, 2, 3, 3]);
        let b = Tensor::zeros([1, 3, 3, 3]);
        assert!(broadcast_zip(&a, &b, |x, y| x + y).is_err());
    }

    #[test]
    fn sum_to_is_adjoint_of_broadcast() {
        let mut rng = rand::thread_rng();
        let small = Tensor::randn([1, 3, 1, 1], 1.0, &mut rng);
        let big = Tensor::randn([2, 3, 4, 5], 1.0, &mut rng);
        let lhs = broadcast_to(&small, big.shape()).unwrap().dot(&big);
        let rhs = small.dot(&sum_to(&big, small.shape()).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
