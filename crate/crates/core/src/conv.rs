//! 2-D convolution kernels (im2col + GEMM) and their adjoints.
//!
//! `conv2d`, `conv2d_input_grad` and `conv2d_weight_grad` are the three
//! bilinear maps of a convolution layer. Each one's partial derivatives are
//! again one of the three, which is what lets the autograd tape take
//! gradients of gradients.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    /// Stride 1 with `(k - 1) / 2` zero padding: spatial size is preserved.
    pub fn same(kernel: usize) -> Self {
        ConvGeom {
            pad: (kernel - 1) / 2,
            stride: 1,
        }
    }

    pub fn valid(stride: usize) -> Self {
        ConvGeom { pad: 0, stride }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Result<usize> {
        let padded = len + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return Err(Error::invalid(format!(
                "kernel {kernel} does not fit input extent {len} with padding {}",
                self.pad
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct Dims {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    pad: isize,
    stride: usize,
}

fn im2col(x: &[f64], d: &Dims, cols: &mut [f64]) {
    let ohw = d.oh * d.ow;
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad;
                        *v = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &Dims, x: &mut [f64]) {
    let ohw = d.oh * d.ow;
    for c in 0..d.c {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, with the
/// transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: bounds checked above; strides describe row-major m×k, k×n and
    // m×n matrices (or their transposes) inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims(in_shape: Shape, w_shape: Shape, geom: ConvGeom) -> Result<Dims> {
    let [_, c, h, w] = in_shape;
    let [_, wc, kh, kw] = w_shape;
    if wc != c {
        return Err(Error::invalid(format!(
            "conv weight expects {wc} input channels, input has {c}"
        )));
    }
    if kh != kw {
        return Err(Error::invalid("only square kernels are supported"));
    }
    Ok(Dims {
        c,
        h,
        w,
        k: kh,
        oh: geom.out_len(h, kh)?,
        ow: geom.out_len(w, kw)?,
        pad: geom.pad as isize,
        stride: geom.stride,
    })
}

/// Cross-correlation `y[n,o] = Σ_c w[o,c] ⋆ x[n,c]` with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let d = dims(x.shape(), w.shape(), geom)?;
    let n = x.batch();
    let o = w.batch();
    let ckk = d.c * d.k * d.k;
    let ohw = d.oh * d.ow;
    let mut out = Tensor::zeros([n, o, d.oh, d.ow]);
    let mut cols = vec![0.0; ckk * ohw];
    let in_len = d.c * d.h * d.w;
    for i in 0..n {
        im2col(&x.data()[i * in_len..(i + 1) * in_len], &d, &mut cols);
        let dst = &mut out.data_mut()[i * o * ohw..(i + 1) * o * ohw];
        gemm(o, ckk, ohw, w.data(), false, &cols, false, 0.0, dst);
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(g: &Tensor, w: &Tensor, in_shape: Shape, geom: ConvGeom) -> Result<Tensor> {
    let d = dims(in_shape, w.shape(), geom)?;
    let o = w.batch();
    if g.shape() != [in_shape[0], o, d.oh, d.ow] {
        return Err(Error::invalid(format!(
            "output gradient {:?} does not match conv output [{}, {o}, {}, {}]",
            g.shape(),
            in_shape[0],
            d.oh,
            d.ow
        )));
    }
    let ckk = d.c * d.k * d.k;
    let ohw = d.oh * d.ow;
    let in_len = d.c * d.h * d.w;
    let mut out = Tensor::zeros(in_shape);
    let mut cols = vec![0.0; ckk * ohw];
    for i in 0..in_shape[0] {
        let gi = &g.data()[i * o * ohw..(i + 1) * o * ohw];
        gemm(ckk, o, ohw, w.data(), true, gi, false, 0.0, &mut cols);
        col2im(&cols, &d, &mut out.data_mut()[i * in_len..(i + 1) * in_len]);
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(x: &Tensor, g: &Tensor, w_shape: Shape, geom: ConvGeom) -> Result<Tensor> {
    let d = dims(x.shape(), w_shape, geom)?;
    let o = w_shape[0];
    let n = x.batch();
    if g.shape() != [n, o, d.oh, d.ow] {
        return Err(Error::invalid(format!(
            "output gradient {:?} does not match conv output [{n}, {o}, {}, {}]",
            g.shape(),
            d.oh,
            d.ow
        )));
    }
    let ckk = d.c * d.k * d.k;
    let ohw = d.oh * d.ow;
    let in_len = d.c * d.h * d.w;
    let mut out = Tensor::zeros(w_shape);
    let mut cols = vec![0.0; ckk * ohw];
    for i in 0..n {
        im2col(&x.data()[i * in_len..(i + 1) * in_len], &d, &mut cols);
        let gi = &g.data()[i * o * ohw..(i + 1) * o * ohw];
        gemm(o, ohw, ckk, gi, false, &cols, true, 1.0, out.data_mut());
    }
    Ok(out)
}

/// Max pooling with a square window, no padding.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let geom = ConvGeom::valid(stride);
    let [n, c, h, w] = x.shape();
    let oh = geom.out_len(h, kernel)?;
    let ow = geom.out_len(w, kernel)?;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch).to_vec();
            let dst = out.plane_mut(i, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            m = m.max(src[(oy * stride + ky) * w + ox * stride + kx]);
                        }
                    }
                    dst[oy * ow + ox] = m;
                }
            }
        }
    }
    Ok(out)
}
