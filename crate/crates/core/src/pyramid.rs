//! Scale ladder and image pyramid.
//!
//! Level 0 is the finest image, level `N` the coarsest. Every level is
//! resampled directly from level 0 so interpolation error does not compound
//! down the ladder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sizes of every pyramid level, finest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    /// `(height, width)` per level, index 0 finest.
    pub sizes: Vec<(usize, usize)>,
    /// Effective scale factor between consecutive levels.
    pub r: f64,
    /// Requested scale factor the ladder was built from.
    pub r_target: f64,
    pub min_size_px: usize,
    pub max_size_px: usize,
}

impl ScaleSchedule {
    /// Number of downsamplings `N`; there are `N + 1` levels.
    pub fn n(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn coarsest(&self) -> usize {
        self.n()
    }
}

// Absorbs representation error so that e.g. 250 / (10^(1/8))^8 floors to 25.
const FLOOR_SLACK: f64 = 1e-6;

fn floor_px(v: f64) -> usize {
    (v + FLOOR_SLACK).floor().max(1.0) as usize
}

/// Number of floor-rounded divisions by `r` before `dim` drops to `min` or
/// below.
fn ladder_depth(dim: usize, min: usize, r: f64) -> usize {
    let mut n = 0;
    let mut d = dim;
    while d > min {
        d = floor_px(d as f64 / r);
        n += 1;
    }
    n
}

/// Build the ladder of level sizes for an input of `input_hw`.
///
/// The input is first shrunk so its smaller side is at most `max_size_px`.
/// The level count is the number of floor-rounded divisions by `r_target`
/// needed to bring the smaller side to `min_size_px`; the effective factor
/// is then adjusted so level `N` lands on `min_size_px`.
pub fn build_schedule(
    input_hw: (usize, usize),
    min_size_px: usize,
    max_size_px: usize,
    r_target: f64,
) -> Result<ScaleSchedule> {
    let (h, w) = input_hw;
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("image dimensions must be positive, got {h}x{w}")));
    }
    if min_size_px < 8 || max_size_px < min_size_px {
        return Err(Error::Config(format!(
            "need 8 <= min_size_px <= max_size_px, got {min_size_px} / {max_size_px}"
        )));
    }
    if !(r_target > 1.0) || !r_target.is_finite() {
        return Err(Error::Config(format!("scale factor must exceed 1, got {r_target}")));
    }

    let short = h.min(w);
    let (h0, w0) = if short > max_size_px {
        let s = max_size_px as f64 / short as f64;
        (floor_px(h as f64 * s), floor_px(w as f64 * s))
    } else {
        (h, w)
    };
    let short0 = h0.min(w0);

    let n = ladder_depth(short0, min_size_px, r_target);
    let r = if n == 0 {
        r_target
    } else {
        (short0 as f64 / min_size_px as f64).powf(1.0 / n as f64)
    };

    let mut sizes = Vec::with_capacity(n + 1);
    sizes.push((h0, w0));
    for level in 1..=n {
        let f = r.powi(level as i32);
        let (ph, pw) = sizes[level - 1];
        // Floor rounding can stall on small sides; keep the ladder strictly
        // decreasing.
        let lh = floor_px(h0 as f64 / f).min(ph.saturating_sub(1)).max(1);
        let lw = floor_px(w0 as f64 / f).min(pw.saturating_sub(1)).max(1);
        sizes.push((lh, lw));
    }
    Ok(ScaleSchedule {
        sizes,
        r,
        r_target,
        min_size_px,
        max_size_px,
    })
}

/// Real images at every scale, finest first, values in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ImagePyramid {
    pub levels: Vec<Tensor>,
}

impl ImagePyramid {
    pub fn level(&self, n: usize) -> &Tensor {
        &self.levels[n]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub fn build_pyramid(image: &Tensor, schedule: &ScaleSchedule) -> Result<ImagePyramid> {
    if image.hw() != schedule.sizes[0] {
        return Err(Error::invalid(format!(
            "image is {:?} but the schedule starts at {:?}",
            image.hw(),
            schedule.sizes[0]
        )));
    }
    let levels = schedule
        .sizes
        .iter()
        .map(|&hw| resample(image, hw).map(|t| t.clamp(-1.0, 1.0)))
        .collect::<Result<_>>()?;
    Ok(ImagePyramid { levels })
}

/// Bilinear upsampling to `target_hw`, which must be at least the source
/// size in both dimensions.
pub fn upsample(image: &Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
    let (h, w) = image.hw();
    if target_hw.0 < h || target_hw.1 < w {
        return Err(Error::invalid(format!(
            "upsample target {target_hw:?} is smaller than source {:?}",
            (h, w)
        )));
    }
    resample(image, target_hw)
}

/// Separable triangle-filter resampling. Downsampling widens the filter by
/// the scale factor (antialiasing); upsampling is plain bilinear. Borders
/// use half-sample symmetric reflection.
pub fn resample(image: &Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
    let [n, c, h, w] = image.shape();
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("resample target must be non-empty"));
    }
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    let rows = axis_taps(h, th);
    let cols = axis_taps(w, tw);

    let mut out = Tensor::zeros([n, c, th, tw]);
    let mut tmp = vec![0.0; th * w];
    for i in 0..n {
        for ch in 0..c {
            let src = image.plane(i, ch);
            for (oy, taps) in rows.iter().enumerate() {
                let line = &mut tmp[oy * w..(oy + 1) * w];
                line.fill(0.0);
                for &(iy, wt) in taps {
                    for (d, s) in line.iter_mut().zip(&src[iy * w..(iy + 1) * w]) {
                        *d += wt * s;
                    }
                }
            }
            let dst = out.plane_mut(i, ch);
            for oy in 0..th {
                let line = &tmp[oy * w..(oy + 1) * w];
                for (ox, taps) in cols.iter().enumerate() {
                    dst[oy * tw + ox] = taps.iter().map(|&(ix, wt)| wt * line[ix]).sum();
                }
            }
        }
    }
    Ok(out)
}

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= len {
        2 * len - i - 1
    } else {
        i
    };
    j.clamp(0, len - 1) as usize
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let wt = (1.0 - (i as f64 - center).abs() / support).max(0.0);
                if wt == 0.0 {
                    continue;
                }
                total += wt;
                let idx = reflect(i, in_len);
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wt,
                    None => taps.push((idx, wt)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Repeated floor division by `r` until the short side is at most `min`.
    fn ladder_oracle(hw: (usize, usize), min: usize, r: f64) -> usize {
        let mut d = hw.0.min(hw.1) as f64;
        let mut n = 0;
        while d.round() as usize > min {
            d = (d / r + 1e-9).floor();
            n += 1;
        }
        n
    }

    #[test]
    fn schedule_250_has_nine_levels() {
        let s = build_schedule((250, 250), 25, 250, 4.0 / 3.0).unwrap();
        assert_eq!(ladder_oracle((250, 250), 25, 4.0 / 3.0), 8);
        assert_eq!(s.n(), 8);
        assert_eq!(s.levels(), 9);
        assert_eq!(s.sizes[0], (250, 250));
        assert_eq!(s.sizes[8], (25, 25));
    }

    #[test]
    fn schedule_at_coarsest_is_single_level() {
        let s = build_schedule((25, 25), 25, 250, 4.0 / 3.0).unwrap();
        assert_eq!(s.n(), 0);
        assert_eq!(s.sizes, vec![(25, 25)]);
        let tiny = build_schedule((12, 30), 25, 250, 4.0 / 3.0).unwrap();
        assert_eq!(tiny.sizes, vec![(12, 30)]);
    }

    #[test]
    fn schedule_rectangular() {
        let s = build_schedule((100, 80), 25, 250, 4.0 / 3.0).unwrap();
        assert_eq!(s.n(), ladder_oracle((100, 80), 25, 4.0 / 3.0));
        let (h, w) = s.sizes[s.n()];
        assert!((24..=26).contains(&h.min(w)), "{:?}", s.sizes);
    }

    #[test]
    fn schedule_shrinks_large_inputs() {
        let s = build_schedule((600, 400), 25, 250, 4.0 / 3.0).unwrap();
        assert_eq!(s.sizes[0], (375, 250));
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(matches!(
            build_schedule((0, 10), 25, 250, 1.5),
            Err(Error::InvalidInput(_))
        ));
        assert!(build_schedule((100, 100), 4, 250, 1.5).is_err());
        assert!(build_schedule((100, 100), 25, 250, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(h in 8usize..400, w in 8usize..400, min in 8usize..40, r in 1.1f64..2.0) {
            let max = 250.max(min);
            let s = build_schedule((h, w), min, max, r).unwrap();
            let short = |hw: (usize, usize)| hw.0.min(hw.1);
            prop_assert!(short(s.sizes[0]) <= max);
            if s.n() > 0 {
                prop_assert!(short(s.sizes[s.n()]) + 1 >= min);
                // Floor rounding only ever shortens the continuous count.
                let d = short(s.sizes[0]) as f64;
                let continuous = ((d / min as f64).ln() / r.ln()).ceil() as usize;
                prop_assert!(s.n() <= continuous);
                let mut steps = 0;
                let mut side = d;
                while side > min as f64 {
                    side = (side / r + 1e-6).floor();
                    steps += 1;
                }
                prop_assert_eq!(s.n(), steps);
            }
            for pair in s.sizes.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                prop_assert!(b.0 < a.0 && b.1 < a.1, "{:?}", s.sizes);
                prop_assert!((a.0 as f64 / s.r - b.0 as f64).abs() <= 1.0 + 1e-9);
                prop_assert!((a.1 as f64 / s.r - b.1 as f64).abs() <= 1.0 + 1e-9);
            }
        }
    }

    fn checkerboard(n: usize) -> Tensor {
        let mut t = Tensor::zeros([1, 1, n, n]);
        for y in 0..n {
            for x in 0..n {
                t.data_mut()[y * n + x] = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        t
    }

    /// 2×2 block average: the exact area resampler for a factor of two.
    fn area_half(t: &Tensor) -> Tensor {
        let (h, w) = t.hw();
        let mut out = Tensor::zeros([1, 1, h / 2, w / 2]);
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                out.data_mut()[y * (w / 2) + x] = (t.at(0, 0, 2 * y, 2 * x)
                    + t.at(0, 0, 2 * y + 1, 2 * x)
                    + t.at(0, 0, 2 * y, 2 * x + 1)
                    + t.at(0, 0, 2 * y + 1, 2 * x + 1))
                    / 4.0;
            }
        }
        out
    }

    #[test]
    fn checkerboard_mean_preserved() {
        let img = checkerboard(64);
        let down = resample(&img, (32, 32)).unwrap();
        let oracle = area_half(&img);
        assert!((down.mean() - oracle.mean()).abs() < 1e-3);
        assert!((down.mean() - img.mean()).abs() < 1e-3);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full([1, 3, 40, 30], 0.25);
        let s = build_schedule((40, 30), 10, 250, 4.0 / 3.0).unwrap();
        let p = build_pyramid(&img, &s).unwrap();
        for (lvl, hw) in p.levels.iter().zip(&s.sizes) {
            assert_eq!(lvl.hw(), *hw);
            assert!(lvl.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        }
        let up = upsample(&p.levels[2], (40, 30)).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn single_level_pyramid_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::randn([1, 3, 20, 20], 0.3, &mut rng).clamp(-1.0, 1.0);
        let s = build_schedule((20, 20), 25, 250, 4.0 / 3.0).unwrap();
        let p = build_pyramid(&img, &s).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.levels[0], img);
    }

    #[test]
    fn pyramid_rejects_dimension_mismatch() {
        let s = build_schedule((64, 64), 25, 250, 4.0 / 3.0).unwrap();
        assert!(build_pyramid(&Tensor::zeros([1, 3, 60, 64]), &s).is_err());
    }

    #[test]
    fn upsample_identity_and_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Tensor::randn([1, 3, 9, 7], 1.0, &mut rng);
        assert_eq!(upsample(&img, (9, 7)).unwrap(), img);
        assert!(matches!(upsample(&img, (8, 7)), Err(Error::InvalidInput(_))));
    }

    /// Separable bilinear with half-pixel centres and edge clamping.
    fn bilinear_oracle(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
        let coord = |o: usize, n_in: usize, n_out: usize| {
            let c = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let c = c.clamp(0.0, (n_in - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, c - i0 as f64)
        };
        let mut out = vec![0.0; th * tw];
        for oy in 0..th {
            let (y0, y1, fy) = coord(oy, h, th);
            for ox in 0..tw {
                let (x0, x1, fx) = coord(ox, w, tw);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[oy * tw + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
        out
    }

    #[test]
    fn ramp_upsample_matches_bilinear_oracle() {
        let ramp = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample(&ramp, (4, 4)).unwrap();
        let oracle = bilinear_oracle(ramp.data(), 2, 2, 4, 4);
        for (a, b) in up.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = Tensor::randn([1, 1, 5, 7], 1.0, &mut rng);
        let up = upsample(&img, (9, 11)).unwrap();
        let oracle = bilinear_oracle(img.data(), 5, 7, 9, 11);
        for (a, b) in up.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pyramid_is_linear(a in -1.0f64..1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::randn([1, 3, 30, 26], 0.3, &mut rng).clamp(-1.0, 1.0);
            let s = build_schedule((30, 26), 10, 250, 4.0 / 3.0).unwrap();
            let p = build_pyramid(&img, &s).unwrap();
            let q = build_pyramid(&img.scale(a), &s).unwrap();
            for (x, y) in p.levels.iter().zip(&q.levels) {
                for (u, v) in x.data().iter().zip(y.data()) {
                    prop_assert!((a * u - v).abs() < 1e-6);
                }
            }
        }
    }
}
