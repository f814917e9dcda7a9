//! A (possibly partial) ladder of trained scales and the generator chain
//! that runs through it.

use std::collections::BTreeMap;

use rand::Rng;

use crate::attacks::KappaEstimator;
use crate::error::{Error, Result};
use crate::model::{generator_forward, NetParams};
use crate::pyramid::{upsample, ScaleSchedule};
use crate::tensor::{Shape, Tensor};

/// Everything kept from one trained scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleModel {
    pub index: usize,
    pub generator: NetParams,
    pub discriminator: NetParams,
    /// Amplitude of the fresh noise injected at this scale.
    pub sigma: f64,
    /// Fixed noise of the reconstruction path: a random draw at the
    /// coarsest scale, zero elsewhere.
    pub z_rec: Tensor,
    pub kappa: KappaEstimator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ladder {
    pub schedule: ScaleSchedule,
    pub image_channels: usize,
    pub scales: BTreeMap<usize, ScaleModel>,
}

impl Ladder {
    pub fn new(schedule: ScaleSchedule, image_channels: usize) -> Self {
        Ladder {
            schedule,
            image_channels,
            scales: BTreeMap::new(),
        }
    }

    pub fn coarsest(&self) -> usize {
        self.schedule.n()
    }

    pub fn scale(&self, n: usize) -> Result<&ScaleModel> {
        self.scales
            .get(&n)
            .ok_or_else(|| Error::invalid(format!("scale {n} is not trained (ladder has 0..={})", self.coarsest())))
    }

    pub fn shape_at(&self, n: usize) -> Shape {
        let (h, w) = self.schedule.sizes[n];
        [1, self.image_channels, h, w]
    }

    /// Run generators `start, start−1, …, stop`. `prev` is the image coming
    /// from above `start` (any size no larger than level `start`) and must be
    /// `None` exactly when `start` is the coarsest scale. `noise(k, shape)`
    /// supplies the already-scaled noise map for scale `k`.
    pub fn run_chain(
        &self,
        start: usize,
        stop: usize,
        prev: Option<&Tensor>,
        noise: &mut dyn FnMut(usize, Shape) -> Tensor,
    ) -> Result<Tensor> {
        if stop > start || start > self.coarsest() {
            return Err(Error::invalid(format!(
                "invalid scale range {start}..={stop} for a ladder with coarsest scale {}",
                self.coarsest()
            )));
        }
        if prev.is_none() != (start == self.coarsest()) {
            return Err(Error::invalid("an input image is required below the coarsest scale"));
        }
        let mut cur = prev.cloned();
        for k in (stop..=start).rev() {
            let shape = self.shape_at(k);
            let up = match &cur {
                Some(p) => Some(upsample(p, (shape[2], shape[3]))?),
                None => None,
            };
            let z = noise(k, shape);
            cur = Some(generator_forward(&self.scale(k)?.generator, &z, up.as_ref())?);
        }
        Ok(cur.expect("at least one scale ran"))
    }

    /// Noise of the reconstruction path at scale `k`.
    pub fn rec_noise(&self, k: usize) -> Tensor {
        match self.scales.get(&k) {
            Some(s) => s.z_rec.clone(),
            None => Tensor::zeros(self.shape_at(k)),
        }
    }

    /// Fixed-noise reconstruction `x̃rec_stop`.
    pub fn reconstruct(&self, stop: usize) -> Result<Tensor> {
        self.run_chain(self.coarsest(), stop, None, &mut |k, _| self.rec_noise(k))
    }

    /// A fresh random image at scale `stop`, with noise at every scale.
    pub fn sample_from_top<R: Rng>(&self, stop: usize, rng: &mut R) -> Result<Tensor> {
        self.run_chain(self.coarsest(), stop, None, &mut |k, shape| {
            let sigma = self.scales.get(&k).map_or(0.0, |s| s.sigma);
            Tensor::randn(shape, sigma, rng)
        })
    }
}
