//! Inference on a trained ladder: random samples, paint-to-image, style
//! transfer and super-resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ladder::Ladder;
use crate::model::generator_forward;
use crate::pyramid::{resample, upsample};
use crate::tensor::Tensor;

fn check_scale(ladder: &Ladder, scale: usize, lowest: usize) -> Result<()> {
    let n = ladder.coarsest();
    if scale < lowest || scale > n {
        return Err(Error::invalid(format!("scale {scale} is outside {lowest}..={n}")));
    }
    Ok(())
}

fn sigma(ladder: &Ladder, k: usize) -> f64 {
    ladder.scales.get(&k).map_or(0.0, |s| s.sigma)
}

/// `count` full-resolution samples with fresh noise at scales
/// `start_scale, …, 0` and the fixed reconstruction path above.
pub fn sample(ladder: &Ladder, start_scale: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    check_scale(ladder, start_scale, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            ladder.run_chain(ladder.coarsest(), 0, None, &mut |k, shape| {
                if k <= start_scale {
                    Tensor::randn(shape, sigma(ladder, k), &mut rng)
                } else {
                    ladder.rec_noise(k)
                }
            })
        })
        .collect()
}

/// Resize `painting` to level `inject_scale` and run it down through the
/// finer scales. With `noise_seed` the finer scales get fresh noise;
/// without it they use the reconstruction noise.
pub fn paint_to_image(ladder: &Ladder, painting: &Tensor, inject_scale: usize, noise_seed: Option<u64>) -> Result<Tensor> {
    check_scale(ladder, inject_scale, 1)?;
    if painting.batch() != 1 || painting.channels() != ladder.image_channels {
        return Err(Error::invalid(format!(
            "painting must be a single {}-channel image, got shape {:?}",
            ladder.image_channels,
            painting.shape()
        )));
    }
    let base = resample(painting, ladder.schedule.sizes[inject_scale])?;
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    ladder.run_chain(inject_scale - 1, 0, Some(&base), &mut |k, shape| match rng.as_mut() {
        Some(r) => Tensor::randn(shape, sigma(ladder, k), r),
        None => ladder.rec_noise(k),
    })
}

/// Paint-to-image with a content photograph on a ladder trained on a
/// style image.
pub fn style_transfer(ladder: &Ladder, content: &Tensor, inject_scale: usize, noise_seed: Option<u64>) -> Result<Tensor> {
    paint_to_image(ladder, content, inject_scale, noise_seed)
}

/// One output per injection scale `1..=N`, finest injection first.
pub fn paint_sweep(ladder: &Ladder, painting: &Tensor, noise_seed: Option<u64>) -> Result<Vec<Tensor>> {
    (1..=ladder.coarsest())
        .map(|s| paint_to_image(ladder, painting, s, noise_seed))
        .collect()
}

/// Per-step factor `s^(1/k)`.
pub fn sr_step_factor(s: f64, k: usize) -> f64 {
    s.powf(1.0 / k as f64)
}

/// Upscale by `s` in `k` passes through the finest generator, each pass
/// upsampling by `s^(1/k)` and adding noise at the finest scale's
/// amplitude. The ladder must have been trained with that factor.
pub fn super_resolve(ladder: &Ladder, image: &Tensor, s: f64, k: usize, seed: u64) -> Result<Tensor> {
    if !(s >= 1.0 && s.is_finite()) || k == 0 {
        return Err(Error::invalid(format!("super-resolution needs s >= 1 and k >= 1, got s={s} k={k}")));
    }
    if image.batch() != 1 || image.channels() != ladder.image_channels {
        return Err(Error::invalid(format!("cannot super-resolve tensor of shape {:?}", image.shape())));
    }
    let finest = ladder.scale(0)?;
    if s > 1.0 {
        let r = sr_step_factor(s, k);
        let trained = ladder.schedule.r_target;
        if ((trained - r) / r).abs() > 1e-6 {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with scale factor {trained}, super-resolution by {s} in {k} steps needs {r}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h0, w0) = image.hw();
    let mut cur = image.clone();
    for i in 1..=k {
        let f = sr_step_factor(s, k).powi(i as i32);
        let hw = ((h0 as f64 * f).round() as usize, (w0 as f64 * f).round() as usize);
        let up = upsample(&cur, hw)?;
        let z = Tensor::randn(up.shape(), finest.sigma, &mut rng);
        cur = generator_forward(&finest.generator, &z, Some(&up))?;
    }
    Ok(cur)
}
