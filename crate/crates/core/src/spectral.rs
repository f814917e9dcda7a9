//! Power iteration for the largest singular value of a linear operator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, ConvGeom};
use crate::tensor::Tensor;

/// A linear map given by its action and the action of its adjoint.
pub trait LinearOperator {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64>;
}

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        DenseOperator { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        DenseOperator::new(n, n, data)
    }
}

impl LinearOperator for DenseOperator {
    fn in_dim(&self) -> usize {
        self.cols
    }

    fn out_dim(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
        out
    }
}

/// A stride-1, same-padded convolution acting on one `C × H × W` image,
/// viewed as the unrolled matrix it applies.
#[derive(Clone, Debug)]
pub struct ConvOperator<'a> {
    weight: &'a Tensor,
    hw: (usize, usize),
}

impl<'a> ConvOperator<'a> {
    pub fn new(weight: &'a Tensor, hw: (usize, usize)) -> Self {
        ConvOperator { weight, hw }
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom::same(self.weight.shape()[2])
    }

    fn in_shape(&self) -> [usize; 4] {
        [1, self.weight.shape()[1], self.hw.0, self.hw.1]
    }

    fn out_shape(&self) -> [usize; 4] {
        [1, self.weight.shape()[0], self.hw.0, self.hw.1]
    }
}

impl LinearOperator for ConvOperator<'_> {
    fn in_dim(&self) -> usize {
        self.in_shape().iter().product()
    }

    fn out_dim(&self) -> usize {
        self.out_shape().iter().product()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let x = Tensor::from_vec(self.in_shape(), x.to_vec()).expect("input length");
        conv::conv2d(&x, self.weight, self.geom())
            .expect("conv geometry")
            .into_vec()
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let y = Tensor::from_vec(self.out_shape(), y.to_vec()).expect("output length");
        conv::conv2d_input_grad(&y, self.weight, self.in_shape(), self.geom())
            .expect("conv geometry")
            .into_vec()
    }
}

/// Stopping rule for power iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerIteration {
    pub max_iters: usize,
    /// Stop once the relative change of the estimate drops below this.
    pub tol: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            max_iters: 500,
            tol: 1e-9,
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Deterministic, generic starting vector.
pub fn initial_vector(dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
    let mut v: Vec<f64> = (0..dim)
        .map(|_| rand::Rng::gen_range(&mut rng, 0.5..1.5))
        .collect();
    normalize(&mut v);
    v
}

/// Largest singular value of `op` by power iteration on `AᵀA`.
pub fn spectral_norm(op: &dyn LinearOperator, rule: PowerIteration) -> f64 {
    let mut v = initial_vector(op.in_dim());
    spectral_norm_warm(op, rule, &mut v)
}

/// As [`spectral_norm`], starting from (and updating) `v`. A `v` of the
/// wrong length is replaced by the default start vector.
pub fn spectral_norm_warm(op: &dyn LinearOperator, rule: PowerIteration, v: &mut Vec<f64>) -> f64 {
    if v.len() != op.in_dim() || normalize(v) == 0.0 {
        *v = initial_vector(op.in_dim());
    }
    let mut sigma = 0.0;
    for _ in 0..rule.max_iters.max(1) {
        let u = op.apply(v);
        let next = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if next == 0.0 {
            return 0.0;
        }
        let mut w = op.apply_adjoint(&u);
        if normalize(&mut w) == 0.0 {
            return next;
        }
        *v = w;
        let converged = (next - sigma).abs() <= rule.tol * next;
        sigma = next;
        if converged {
            break;
        }
    }
    // One more application so the estimate corresponds to the final vector.
    let u = op.apply(v);
    u.iter().map(|x| x * x).sum::<f64>().sqrt().max(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_rank_one() {
        assert!((spectral_norm(&DenseOperator::identity(7), PowerIteration::default()) - 1.0).abs() < 1e-12);
        let u = [0.6, 0.8];
        let v = [1.0 / 3f64.sqrt(); 3];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let op = DenseOperator::new(2, 3, data);
        assert!((spectral_norm(&op, PowerIteration::default()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_operator_has_zero_norm() {
        let op = DenseOperator::new(3, 4, vec![0.0; 12]);
        assert_eq!(spectral_norm(&op, PowerIteration::default()), 0.0);
    }

    #[test]
    fn diagonal_picks_largest_entry() {
        let op = DenseOperator::new(2, 2, vec![3.0, 0.0, 0.0, 1.0]);
        assert!((spectral_norm(&op, PowerIteration::default()) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn conv_operator_adjoint_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn([4, 3, 3, 3], 1.0, &mut rng);
        let op = ConvOperator::new(&w, (5, 6));
        let x: Vec<f64> = Tensor::randn([1, 3, 5, 6], 1.0, &mut rng).into_vec();
        let y: Vec<f64> = Tensor::randn([1, 4, 5, 6], 1.0, &mut rng).into_vec();
        let lhs: f64 = op.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(op.apply_adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn dense_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Tensor::randn([1, 1, 16, 16], 1.0, &mut rng).into_vec();
        let m = nalgebra::DMatrix::from_row_slice(16, 16, &data);
        let expect = m.singular_values().max();
        let rule = PowerIteration { max_iters: 20_000, tol: 1e-14 };
        let got = spectral_norm(&DenseOperator::new(16, 16, data), rule);
        assert!((got - expect).abs() < 1e-4 * expect, "{got} vs {expect}");
    }
}
