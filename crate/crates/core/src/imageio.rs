//! PNG/JPEG conversion to and from `[1, 3, H, W]` tensors in `[-1, 1]`.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.plane_mut(0, c)[y as usize * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    t
}

/// Nearest 8-bit value of a `[-1, 1]` sample.
pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let [n, c, h, w] = t.shape();
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::invalid(format!("cannot encode tensor of shape {:?} as an image", t.shape())));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let ch = |k: usize| to_u8(t.plane(0, if c == 1 { 0 } else { k })[i]);
        Rgb([ch(0), ch(1), ch(2)])
    }))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid(format!("{} is empty", path.display())));
    }
    Ok(from_rgb8(&img))
}

/// Single-channel `[1, 1, H, W]` tensor of the image's 8-bit luma, in
/// `[-1, 1]`.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    Tensor::from_vec([1, 1, h, w], data)
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    to_rgb8(t)?.save(path)?;
    Ok(())
}

/// Map `[-1, 1]` values to `[0, 1]`.
pub fn to_unit(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0)
}
